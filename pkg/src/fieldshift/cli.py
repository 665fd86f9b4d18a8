"""Command line interface: simulate | train | predict | ablate | evaluate.

Configs are JSON with a ``preset`` inheritance key; every command writes a
manifest recording the fully resolved config, tool version, input/output
digests, and wall-clock timings, and builds its output directory under a
temporary name that is renamed into place only on success.  Re-running a
command from its manifest reproduces the outputs byte for byte.

Human-readable progress goes to stdout; machine-readable errors go to
stderr as JSON with exit codes 2 (config), 3 (data), 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time

from . import __version__, parallel
from .augment import AugmentConfig
from .errors import ConfigError, FieldshiftError
from .losses_opt import LrSchedule, TflConfig
from .mc_inference import McConfig, TileScheme
from .network import ArchSpec
from .normalize import NormScheme
from .pipeline import (
    LossSettings,
    OptimizerSettings,
    RunConfig,
    TrainSettings,
    ablate_run,
    evaluate_run,
    predict_run,
    simulate_run,
    train_run,
)
from .scene_sim import SceneConfig, YearShift

PRESETS: dict[str, dict] = {
    # Small enough to simulate, train, and ablate on a laptop CPU.
    "desk": {
        "seed": 29,
        "scene": {
            "scene_size_px": 352,
            "band_count": 4,
            "field_density": 0.35,
            "mean_field_diameter_px": 28,
            "churn_fraction": 0.12,
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
                    "band_std_scale": [1.1, 1.08, 1.05, 1.25],
                    "noise_sigma": 0.012,
                },
                {
                    "year_tag": "y2",
                    "band_mean_offset": [0.04, 0.02, 0.03, 0.06],
                    "band_std_scale": [0.92, 0.95, 1.0, 1.3],
                    "noise_sigma": 0.012,
                },
            ],
        },
        "normalization": "mm-lab",
        "augment": {},
        "arch": {"depth": 3, "base_width": 8, "in_bands": 4, "classes": 3},
        # Adam here: the desk step budget is ~2 orders of magnitude below the
        # full-scale schedule, too short for plain Nesterov from a cold start.
        "loss": {"kind": "tfl", "weight_scope": "batch"},
        "optimizer": {"kind": "adam"},
        "schedule": {"initial_lr": 0.003, "power": 0.8, "total_epochs": 30},
        "train": {
            "epochs": 30,
            "batch_size": 8,
            "chip_size": 40,
            "chip_overlap": 12,
            "val_fraction": 0.2,
            "dropout_regime": "mc",
        },
        "mc": {
            "trials": 10,
            "inference_dropout_rate": 0.1,
            "threshold_policy": "fixed",
            "fixed_threshold": 0.75,
        },
        "tiles": {"core_size": 176, "input_size": 200},
    },
    # The full-scale configuration (documented, not desk-trainable): 32x
    # downsampling, encoder widths 64..1024 with a 2048-wide bottleneck,
    # 120 epochs at lr 0.003 with power-0.8 decay, 30 ensemble trials.
    "xl": {
        "seed": 29,
        "scene": {
            "scene_size_px": 2000,
            "band_count": 4,
            "field_density": 0.35,
            "mean_field_diameter_px": 40,
            "churn_fraction": 0.12,
            "years": [
                {
                    "year_tag": "y0",
                    "band_mean_offset": [0.0, 0.0, 0.0, 0.0],
                    "band_std_scale": [1.0, 1.0, 1.0, 1.0],
                    "noise_sigma": 0.008,
                    "acquisition_smoothing_px": 0.8,
                },
            ],
        },
        "normalization": "mm-lab",
        "augment": {},
        "arch": {"depth": 5, "base_width": 64, "in_bands": 4, "classes": 3},
        "loss": {"kind": "tfl", "weight_scope": "batch"},
        "optimizer": {"kind": "nesterov"},
        "schedule": {"initial_lr": 0.003, "power": 0.8, "total_epochs": 120},
        "train": {
            "epochs": 120,
            "batch_size": 32,
            "chip_size": 200,
            "chip_overlap": 12,
            "val_fraction": 0.04,
            "dropout_regime": "mc",
        },
        "mc": {
            "trials": 30,
            "inference_dropout_rate": 0.1,
            "threshold_policy": "adaptive",
            "fixed_threshold": 0.75,
        },
        "tiles": {"core_size": 2000, "input_size": 2368},
    },
}

_TOP_KEYS = {
    "preset", "seed", "out_dir", "scene", "normalization", "augment", "arch",
    "loss", "optimizer", "schedule", "train", "mc", "tiles", "scene_dir",
    "checkpoint", "prediction_dir", "histogram_match_to_train", "ablate",
}


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, blob: dict, context: str):
    try:
        return cls(**blob)
    except TypeError as exc:
        raise ConfigError(f"{context}: {exc}") from None


def resolve_config(raw: dict) -> dict:
    """Apply preset inheritance and reject unknown top-level keys."""
    if "resolved_config" in raw:  # a manifest: re-run from its frozen config
        raw = raw["resolved_config"]
    preset_name = raw.get("preset", "desk")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset '{preset_name}' (available: {sorted(PRESETS)})")
    merged = _merge(PRESETS[preset_name], {k: v for k, v in raw.items() if k != "preset"})
    merged["preset"] = preset_name
    unknown = set(merged) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in merged or merged["seed"] is None:
        raise ConfigError("config must declare a seed")
    return merged


def build_run_config(resolved: dict) -> RunConfig:
    scene_blob = dict(resolved["scene"])
    years = tuple(
        _build(YearShift, dict(y), f"scene.years[{i}]")
        for i, y in enumerate(scene_blob.pop("years", []))
    )
    scene = _build(SceneConfig, {**scene_blob, "years": years, "seed": resolved["seed"]}, "scene")
    loss_blob = dict(resolved.get("loss", {}))
    tfl = _build(TflConfig, loss_blob.pop("tfl", {}), "loss.tfl")
    cfg = RunConfig(
        seed=int(resolved["seed"]),
        scene=scene,
        norm=NormScheme.from_code(resolved.get("normalization", "mm-lab")),
        augment=_build(AugmentConfig, resolved.get("augment", {}), "augment"),
        arch=_build(ArchSpec, resolved.get("arch", {}), "arch"),
        loss=_build(LossSettings, {**loss_blob, "tfl": tfl}, "loss"),
        optimizer=_build(OptimizerSettings, resolved.get("optimizer", {}), "optimizer"),
        schedule=_build(LrSchedule, resolved.get("schedule", {}), "schedule"),
        train=_build(TrainSettings, resolved.get("train", {}), "train"),
        mc=_build(McConfig, resolved.get("mc", {}), "mc"),
        tiles=_build(TileScheme, resolved.get("tiles", {"core_size": 176, "input_size": 200}), "tiles"),
        out_dir=resolved.get("out_dir"),
        scene_dir=resolved.get("scene_dir"),
        checkpoint=resolved.get("checkpoint"),
        prediction_dir=resolved.get("prediction_dir"),
        histogram_match_to_train=bool(resolved.get("histogram_match_to_train", False)),
        ablate=resolved.get("ablate", {}) or {},
        resolved=resolved,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Manifests and atomic output directories.


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _digest_tree(root: str, skip: tuple[str, ...] = ()) -> dict[str, str]:
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            if rel in skip:
                continue
            out[rel] = _sha256(full)
    return dict(sorted(out.items()))


def _digest_inputs(paths: list[str | None]) -> dict[str, str]:
    out = {}
    for p in paths:
        if not p:
            continue
        if os.path.isdir(p):
            for rel, digest in _digest_tree(p).items():
                out[os.path.join(p, rel)] = digest
        elif os.path.exists(p):
            out[p] = _sha256(p)
    return dict(sorted(out.items()))


class _StagedDir:
    """Build outputs under a temp name; rename into place only on success."""

    def __init__(self, final: str):
        self.final = final
        self.tmp = f"{final}.partial-{os.getpid()}"

    def __enter__(self) -> str:
        if os.path.exists(self.final):
            raise ConfigError(f"output directory already exists: {self.final}")
        if os.path.exists(self.tmp):
            shutil.rmtree(self.tmp)
        os.makedirs(self.tmp)
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            os.replace(self.tmp, self.final)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)


def _write_manifest(
    tmp_dir: str, command: str, resolved: dict, inputs: dict, started: float, extra: dict
) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "resolved_config": resolved,
        "inputs": inputs,
        "outputs": _digest_tree(tmp_dir, skip=("manifest.json",)),
        "timings": {"wall_seconds": round(time.time() - started, 3)},
        "extra": extra,
    }
    with open(os.path.join(tmp_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Commands.


def cmd_simulate(cfg: RunConfig, out_dir: str) -> None:
    started = time.time()
    with _StagedDir(out_dir) as tmp:
        info = simulate_run(cfg, tmp)
        _write_manifest(tmp, "simulate", cfg.resolved, {}, started,
                        {"years": info["years"], "chips_per_year": len(next(iter(info["chips"].values())))})
    print(f"simulate: scene written to {out_dir}")


def cmd_train(cfg: RunConfig, out_dir: str) -> None:
    if not cfg.scene_dir:
        raise ConfigError("train requires scene_dir in the config")
    started = time.time()
    inputs = _digest_inputs([cfg.scene_dir])
    with _StagedDir(out_dir) as tmp:
        meta = train_run(cfg, cfg.scene_dir, tmp)
        _write_manifest(tmp, "train", cfg.resolved, inputs, started,
                        {"best_epoch": meta["best_epoch"], "best_val_iou": meta["best_val_iou"]})
    print(
        f"train: checkpoint at {out_dir}/checkpoint.fsnw "
        f"(best epoch {meta['best_epoch']}, val IoU {meta['best_val_iou']:.4f})"
    )


def cmd_predict(cfg: RunConfig, out_dir: str) -> None:
    if not cfg.scene_dir or not cfg.checkpoint:
        raise ConfigError("predict requires scene_dir and checkpoint in the config")
    started = time.time()
    inputs = _digest_inputs([cfg.scene_dir, cfg.checkpoint])
    with _StagedDir(out_dir) as tmp:
        summary = predict_run(cfg, cfg.checkpoint, cfg.scene_dir, tmp)
        _write_manifest(tmp, "predict", cfg.resolved, inputs, started,
                        {"years": sorted(summary["years"])})
    print(f"predict: layers for {len(summary['years'])} years written to {out_dir}")


def cmd_evaluate(cfg: RunConfig, out_dir: str) -> None:
    if not cfg.scene_dir or not cfg.prediction_dir:
        raise ConfigError("evaluate requires scene_dir and prediction_dir in the config")
    started = time.time()
    inputs = _digest_inputs([cfg.scene_dir, cfg.prediction_dir])
    with _StagedDir(out_dir) as tmp:
        rows = evaluate_run(cfg, cfg.prediction_dir, cfg.scene_dir, tmp)
        _write_manifest(tmp, "evaluate", cfg.resolved, inputs, started, {"rows": len(rows)})
    print(f"evaluate: {len(rows)} rows written to {out_dir}")


def cmd_ablate(cfg: RunConfig, out_dir: str) -> None:
    started = time.time()
    with _StagedDir(out_dir) as tmp:
        status = ablate_run(cfg, tmp, build_run_config)
        _write_manifest(tmp, "ablate", cfg.resolved, {}, started, status)
    done = sum(1 for s in status["cells"].values() if s["status"] == "ok")
    print(f"ablate: {done}/{len(status['cells'])} cells completed, reports in {out_dir}/reports")
    if status["partial_results"]:
        print(f"ablate: failed cells: {status['failed_cells']}")


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldshift",
        description="Cross-year cropland segmentation testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config or a manifest.json")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker thread cap")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument(
            "--no-photometric",
            action="store_true",
            help="disable photometric augmentation stages",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "ConfigError", "message": f"cannot read config: {exc}"}),
              file=sys.stderr)
        return 2
    try:
        resolved = resolve_config(raw)
        if args.seed is not None:
            resolved["seed"] = args.seed
        if args.no_photometric:
            resolved = _merge(resolved, {"augment": {"enable_photometric": False}})
        if args.out:
            resolved["out_dir"] = args.out
        parallel.set_max_threads(args.threads)
        cfg = build_run_config(resolved)
        out_dir = cfg.out_dir
        if not out_dir:
            raise ConfigError("no output directory: set out_dir in the config or pass --out")
        COMMANDS[args.command](cfg, out_dir)
        return 0
    except FieldshiftError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected failure: generic nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
