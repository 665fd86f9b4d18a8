"""Second-stage calibration: directional checks on candidate fixtures."""

import json
import os
import shutil
import sys
import time

from fieldshift.cli import build_run_config, resolve_config
from fieldshift.evaluation import ConfusionCounts, metrics
from fieldshift.pipeline import (
    _merge,
    evaluate_run,
    predict_run,
    simulate_run,
    train_run,
)

REGIME_OVERRIDES = {
    "no_dropout_no_photo": {"augment": {"enable_photometric": False}, "train": {"dropout_regime": "none"}},
    "mc_dropout_no_photo": {"augment": {"enable_photometric": False}, "train": {"dropout_regime": "mc"}},
    "no_dropout_photo": {"train": {"dropout_regime": "none"}},
    "train_dropout_photo": {"train": {"dropout_regime": "train"}},
    "mc_dropout_photo": {"train": {"dropout_regime": "mc"}},
}


def fixture(texture, jitter, y1_nir, y2_nir, noise, epochs, batch, lr, trials):
    return {
        "scene": {
            "scene_size_px": 288,
            "field_density": 0.35,
            "mean_field_diameter_px": 26,
            "churn_fraction": 0.12,
            "background_reflectance": [0.30, 0.31, 0.27, 0.40],
            "field_reflectance": [0.23, 0.27, 0.21, 0.70],
            "background_texture_amp": texture,
            "field_jitter": jitter,
            "years": [
                {"year_tag": "y0", "band_mean_offset": [0, 0, 0, 0],
                 "band_std_scale": [1, 1, 1, 1], "noise_sigma": 0.008,
                 "acquisition_smoothing_px": 1.2},
                {"year_tag": "y1", "band_mean_offset": [0.03, 0.03, 0.02, y1_nir],
                 "band_std_scale": [1.2, 1.15, 1.1, 1.4], "noise_sigma": noise},
                {"year_tag": "y2", "band_mean_offset": [0.05, 0.03, 0.04, y2_nir],
                 "band_std_scale": [0.85, 0.9, 1.05, 1.45], "noise_sigma": noise},
            ],
        },
        "train": {"epochs": epochs, "batch_size": batch, "chip_size": 40, "chip_overlap": 12},
        "schedule": {"initial_lr": lr, "total_epochs": epochs},
        "mc": {"trials": trials, "inference_dropout_rate": 0.1,
               "threshold_policy": "adaptive", "fixed_threshold": 0.75},
        "tiles": {"core_size": 144, "input_size": 176},
    }


def run_matrix(base, seed, overrides):
    resolved0 = resolve_config({"preset": "desk", "seed": seed, **overrides})
    cfg0 = build_run_config(resolved0)
    scene_dir = os.path.join(base, f"scene{seed}")
    os.makedirs(scene_dir)
    simulate_run(cfg0, scene_dir)
    checkpoints = {}
    rows = []
    for name, regime_ov in REGIME_OVERRIDES.items():
        resolved = resolve_config({"preset": "desk", "seed": seed, **_merge(overrides, regime_ov)})
        cfg = build_run_config(resolved)
        train_key = (cfg.train.dropout_regime != "none", cfg.augment.enable_photometric)
        if train_key not in checkpoints:
            tdir = os.path.join(base, f"train{seed}_{train_key[0]}_{train_key[1]}")
            os.makedirs(tdir)
            meta = train_run(cfg, scene_dir, tdir)
            checkpoints[train_key] = (os.path.join(tdir, "checkpoint.fsnw"), meta["best_val_iou"])
        ckpt, val_iou = checkpoints[train_key]
        pdir = os.path.join(base, f"pred{seed}_{name}")
        os.makedirs(pdir)
        predict_run(cfg, ckpt, scene_dir, pdir)
        rows.extend(evaluate_run(cfg, pdir, scene_dir, run_id=name))
    return rows, {k: v[1] for k, v in checkpoints.items()}


def pool(rows, run_id, years):
    total = ConfusionCounts()
    for r in rows:
        if r.run_id == run_id and r.year in years:
            total = total + ConfusionCounts(tp=r.tp, fp=r.fp, fn=r.fn, tn=r.tn)
    return total


def check_seed(rows):
    stats = {}
    for name in REGIME_OVERRIDES:
        on = metrics(pool(rows, name, ("y0",)))
        offc = pool(rows, name, ("y1", "y2"))
        off = metrics(offc)
        stats[name] = dict(iou0=on.iou, iou=off.iou, drop=on.iou - off.iou,
                           rec=off.recall, fp=offc.fp, fn=offc.fn)
    checks = {
        "a": max(stats, key=lambda r: stats[r]["drop"]) == "no_dropout_no_photo",
        "b": (stats["no_dropout_photo"]["rec"] > stats["no_dropout_no_photo"]["rec"]
              and stats["no_dropout_photo"]["fp"] > stats["no_dropout_no_photo"]["fp"]),
        "c": stats["mc_dropout_no_photo"]["fn"] > stats["no_dropout_no_photo"]["fn"],
        "d": max(stats, key=lambda r: stats[r]["iou"]) == "mc_dropout_photo",
    }
    return stats, checks


def main():
    seeds = [int(s) for s in sys.argv[1:]] or [101, 103]
    overrides = fixture(texture=0.05, jitter=0.04, y1_nir=-0.07, y2_nir=0.08,
                        noise=0.03, epochs=60, batch=6, lr=0.002, trials=12)
    base = "/tmp/cal2"
    shutil.rmtree(base, ignore_errors=True)
    os.makedirs(base)
    for seed in seeds:
        t0 = time.time()
        rows, vals = run_matrix(base, seed, overrides)
        stats, checks = check_seed(rows)
        print(f"\n=== seed {seed} ({time.time()-t0:.0f}s) val IoUs {vals}")
        for name, s in stats.items():
            print(f"  {name:22s} iou0 {s['iou0']:.3f} iou_shift {s['iou']:.3f} drop {s['drop']:+.3f}"
                  f" rec {s['rec']:.3f} FP {s['fp']:7d} FN {s['fn']:7d}")
        print("  checks:", checks)
    sys.stdout.flush()


if __name__ == "__main__":
    main()
