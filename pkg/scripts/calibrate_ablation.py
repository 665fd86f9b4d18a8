"""Calibration harness for the directional ablation fixture.

Runs the 5-regime matrix for a handful of seeds and prints the quantities
the acceptance orderings are defined over.  Not part of the package.
"""

import json
import os
import shutil
import sys
import time

import numpy as np

from fieldshift.cli import build_run_config, resolve_config
from fieldshift.evaluation import ConfusionCounts, metrics
from fieldshift.pipeline import ablate_run, simulate_run

ABLATION_OVERRIDES = {
    "scene": {
        "scene_size_px": 288,
        "field_density": 0.35,
        "mean_field_diameter_px": 26,
        "churn_fraction": 0.12,
        "background_reflectance": [0.30, 0.31, 0.27, 0.40],
        "field_reflectance": [0.23, 0.27, 0.21, 0.70],
        "background_texture_amp": 0.03,
        "field_jitter": 0.02,
        "years": [
            {
                "year_tag": "y0",
                "band_mean_offset": [0.0, 0.0, 0.0, 0.0],
                "band_std_scale": [1.0, 1.0, 1.0, 1.0],
                "noise_sigma": 0.008,
                "acquisition_smoothing_px": 0.8,
            },
            {
                "year_tag": "y1",
                "band_mean_offset": [0.03, 0.03, 0.02, -0.05],
                "band_std_scale": [1.15, 1.1, 1.1, 1.3],
                "noise_sigma": 0.018,
            },
            {
                "year_tag": "y2",
                "band_mean_offset": [0.04, 0.02, 0.03, 0.06],
                "band_std_scale": [0.9, 0.95, 1.05, 1.35],
                "noise_sigma": 0.018,
            },
        ],
    },
    "train": {"epochs": 36, "batch_size": 5, "chip_size": 40, "chip_overlap": 12},
    "schedule": {"initial_lr": 0.003, "total_epochs": 36},
    "mc": {"trials": 8, "inference_dropout_rate": 0.1,
           "threshold_policy": "adaptive", "fixed_threshold": 0.75},
    "tiles": {"core_size": 144, "input_size": 176},
}

REGIMES = ["no_dropout_no_photo", "mc_dropout_no_photo", "no_dropout_photo",
           "train_dropout_photo", "mc_dropout_photo"]


def pooled(rows, years):
    total = ConfusionCounts()
    for r in rows:
        if r.year in years:
            total = total + ConfusionCounts(tp=r.tp, fp=r.fp, fn=r.fn, tn=r.tn)
    return total


def run_seed(seed: int, base: str, overrides: dict):
    out = os.path.join(base, f"seed{seed}")
    resolved = resolve_config({"preset": "desk", "seed": seed, **overrides})
    cfg = build_run_config(resolved)
    os.makedirs(out)
    status = ablate_run(cfg, out, build_run_config)
    rows_csv = os.path.join(out, "reports", "rows.csv")
    rows = []
    import csv

    from fieldshift.evaluation import MetricsRow

    with open(rows_csv) as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricsRow(
                run_id=rec["run_id"], norm_scheme=rec["norm_scheme"], year=rec["year"],
                tile_id=rec["tile_id"], tp=int(rec["tp"]), fp=int(rec["fp"]),
                fn=int(rec["fn"]), tn=int(rec["tn"]),
            ))
    return rows, status


def summarize(rows, shifted=("y1", "y2")):
    table = {}
    for regime in REGIMES:
        sub = [r for r in rows if r.run_id == regime]
        if not sub:
            continue
        on = metrics(pooled(sub, ("y0",)))
        off = metrics(pooled(sub, shifted))
        cnt = pooled(sub, shifted)
        table[regime] = {
            "iou_y0": on.iou, "iou_shift": off.iou, "drop": on.iou - off.iou,
            "recall_shift": off.recall, "fp": cnt.fp, "fn": cnt.fn,
        }
    return table


def main():
    seeds = [int(s) for s in sys.argv[1:]] or [101, 102]
    base = "/tmp/ablate_cal"
    shutil.rmtree(base, ignore_errors=True)
    os.makedirs(base)
    for seed in seeds:
        t0 = time.time()
        rows, status = run_seed(seed, base, ABLATION_OVERRIDES)
        table = summarize(rows)
        print(f"\n=== seed {seed}  ({time.time()-t0:.0f}s)  failed={status['failed_cells']}")
        for regime, vals in table.items():
            print(
                f"  {regime:22s} iou_y0 {vals['iou_y0']:.3f}  iou_shift {vals['iou_shift']:.3f}"
                f"  drop {vals['drop']:+.3f}  recall_shift {vals['recall_shift']:.3f}"
                f"  FP {vals['fp']:6d}  FN {vals['fn']:6d}"
            )
        checks = {
            "(a) baseline largest drop": max(table, key=lambda r: table[r]["drop"]) == "no_dropout_no_photo",
            "(b) photo recall up": table["no_dropout_photo"]["recall_shift"] > table["no_dropout_no_photo"]["recall_shift"],
            "(b) photo FP up": table["no_dropout_photo"]["fp"] > table["no_dropout_no_photo"]["fp"],
            "(c) dropout FN up": table["mc_dropout_no_photo"]["fn"] > table["no_dropout_no_photo"]["fn"],
            "(d) mc+photo best": max(table, key=lambda r: table[r]["iou_shift"]) == "mc_dropout_photo",
        }
        for name, ok in checks.items():
            print(f"    {name}: {'PASS' if ok else 'FAIL'}")


if __name__ == "__main__":
    main()
