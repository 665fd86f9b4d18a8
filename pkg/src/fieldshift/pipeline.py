"""End-to-end workflow engines behind the CLI commands.

Everything here is a pure function of (resolved config, seed): scene
simulation, training, whole-scene ensemble prediction, evaluation, and the
ablation matrix.  Outputs are container files plus CSV logs; the CLI layer
owns manifests and atomic directory placement.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import containers, evaluation, labeling
from .augment import AugmentConfig, augment_pair
from .errors import CheckpointError, ConfigError, DataError, TrainingError
from .losses_opt import (
    ClassWeights,
    LrSchedule,
    OptState,
    TflConfig,
    dynamic_class_weights,
    lr_at,
    optimizer_step,
    sam_step,
    tversky_focal_loss,
    weighted_ce_loss,
)
from .mc_inference import McConfig, TileScheme, mc_predict, predict_scene
from .network import (
    ArchSpec,
    NetworkParams,
    backward,
    forward,
    init_params,
    softmax,
    softmax_grad_to_logits,
)
from .normalize import NormScheme, NormStats, compute_stats, normalize_chip
from .raster import INTERIOR, Chip, LabelMask
from .rng import DOMAIN_AUGMENT, DOMAIN_DROPOUT, DOMAIN_MC, DOMAIN_ORDER, derive_seed, stream
from .scene_sim import Scene, SceneConfig, export_chips, generate_scene, scene_labels


@dataclass(frozen=True)
class LossSettings:
    kind: str = "tfl"            # "tfl" | "ce"
    tfl: TflConfig = TflConfig()
    weight_scope: str = "batch"  # "batch" (per batch, on the fly) | "dataset" (frozen)
    weight_cap: float = 100.0

    def __post_init__(self) -> None:
        if self.kind not in ("tfl", "ce"):
            raise ConfigError(f"unknown loss kind '{self.kind}'")
        if self.weight_scope not in ("batch", "dataset"):
            raise ConfigError(f"unknown weight scope '{self.weight_scope}'")


@dataclass(frozen=True)
class OptimizerSettings:
    kind: str = "nesterov"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.05
    inner_kind: str = "nesterov"

    def make_state(self) -> OptState:
        return OptState(
            kind=self.kind,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            rho=self.rho,
            inner_kind=self.inner_kind,
        )


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    chip_size: int = 40
    chip_overlap: int = 12
    val_fraction: float = 0.2
    dropout_regime: str = "mc"   # "none" | "train" | "mc"
    train_year: str | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.dropout_regime not in ("none", "train", "mc"):
            raise ConfigError(f"unknown dropout regime '{self.dropout_regime}'")


@dataclass
class RunConfig:
    seed: int
    scene: SceneConfig
    norm: NormScheme
    augment: AugmentConfig
    arch: ArchSpec
    loss: LossSettings
    optimizer: OptimizerSettings
    schedule: LrSchedule
    train: TrainSettings
    mc: McConfig
    tiles: TileScheme
    out_dir: str | None = None
    scene_dir: str | None = None
    checkpoint: str | None = None
    prediction_dir: str | None = None
    histogram_match_to_train: bool = False
    ablate: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)  # the merged JSON this was built from

    def validate(self) -> None:
        self.scene.validate()
        self.augment.validate()
        if self.train.epochs > self.schedule.total_epochs:
            raise ConfigError(
                f"train epochs {self.train.epochs} exceed schedule total {self.schedule.total_epochs}"
            )
        window = self.train.chip_size + 2 * self.train.chip_overlap
        if window % self.arch.downsample_factor:
            raise ConfigError(
                f"chip window {window} not divisible by downsampling factor {self.arch.downsample_factor}"
            )
        if self.tiles.input_size % self.arch.downsample_factor:
            raise ConfigError(
                f"tile input {self.tiles.input_size} not divisible by downsampling factor "
                f"{self.arch.downsample_factor}"
            )
        if self.scene.scene_size_px % self.tiles.core_size:
            raise ConfigError(
                f"scene {self.scene.scene_size_px} not divisible into {self.tiles.core_size}-pixel cores"
            )


# ---------------------------------------------------------------------------
# Scene directory layout.


def simulate_run(cfg: RunConfig, out_dir: str) -> dict:
    """Generate the scene and write imagery, labels, and training chips."""
    scene = generate_scene(cfg.scene)
    labels = {y: scene_labels(scene, y) for y in scene.imagery}
    pairs = export_chips(
        scene,
        cfg.train.chip_size,
        cfg.train.chip_overlap,
        downsample_factor=cfg.arch.downsample_factor,
        labels=labels,
    )
    os.makedirs(os.path.join(out_dir, "imagery"))
    os.makedirs(os.path.join(out_dir, "labels"))
    manifest: dict = {
        "years": [y.year_tag for y in cfg.scene.years],
        "imagery": {},
        "labels": {},
        "chips": {},
        "chip_geometry": {
            "chip_size": cfg.train.chip_size,
            "overlap": cfg.train.chip_overlap,
        },
        "config": cfg.resolved.get("scene", {}),
        "seed": cfg.seed,
    }
    for year, chip in scene.imagery.items():
        rel = f"imagery/{year}.fsch"
        containers.write_chip(os.path.join(out_dir, rel), chip)
        manifest["imagery"][year] = rel
        rel_mask = f"labels/{year}.fsmk"
        containers.write_mask(os.path.join(out_dir, rel_mask), labels[year])
        manifest["labels"][year] = rel_mask
        labeling.mask_to_png(labels[year], os.path.join(out_dir, f"labels/{year}.png"))
        manifest["chips"][year] = []
    for chip, mask in pairs:
        year_dir = os.path.join(out_dir, "chips", chip.year)
        os.makedirs(year_dir, exist_ok=True)
        chip_rel = f"chips/{chip.year}/{chip.tile_id}.fsch"
        mask_rel = f"chips/{chip.year}/{chip.tile_id}.fsmk"
        containers.write_chip(os.path.join(out_dir, chip_rel), chip)
        containers.write_mask(os.path.join(out_dir, mask_rel), mask)
        manifest["chips"][chip.year].append(
            {"tile_id": chip.tile_id, "chip": chip_rel, "mask": mask_rel}
        )
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def load_scene_manifest(scene_dir: str) -> dict:
    path = os.path.join(scene_dir, "scene.json")
    if not os.path.exists(path):
        raise DataError(f"{scene_dir} is not a scene directory (missing scene.json)")
    with open(path) as fh:
        return json.load(fh)


def _load_chip_pairs(scene_dir: str, manifest: dict, year: str) -> list[tuple[Chip, LabelMask]]:
    pairs = []
    for entry in sorted(manifest["chips"][year], key=lambda e: e["tile_id"]):
        chip = containers.read_chip(os.path.join(scene_dir, entry["chip"]))
        mask = containers.read_mask(os.path.join(scene_dir, entry["mask"]))
        pairs.append((chip, mask))
    return pairs


# ---------------------------------------------------------------------------
# Training.


def _batch_iou(params: NetworkParams, chips: list[np.ndarray], masks: list[LabelMask]) -> float:
    total = evaluation.ConfusionCounts()
    for data, mask in zip(chips, masks):
        logits, _ = forward(params, data[None], mode="eval")
        pred = LabelMask(np.argmax(logits[0], axis=0).astype(np.uint8))
        total = total + evaluation.confusion_counts(pred, mask)
    return evaluation.metrics(total).iou


def _loss_and_grads(cfg: RunConfig, params, x, targets, weights, rate, drop_rng_keys):
    def grad_fn(tensors):
        p = NetworkParams(cfg.arch, tensors)
        logits, cache = forward(
            p, x, mode="train", dropout_rate=rate, rng=stream(*drop_rng_keys)
        )
        probs = softmax(logits.astype(np.float64))  # keep the loss path in 64-bit
        if cfg.loss.kind == "tfl":
            loss, gp = tversky_focal_loss(probs, targets, cfg=cfg.loss.tfl, weights=weights)
        else:
            loss, gp = weighted_ce_loss(probs, targets, weights=weights)
        gl = softmax_grad_to_logits(probs, gp)
        grads, _ = backward(p, cache, gl.astype(x.dtype, copy=False))
        return loss, grads

    return grad_fn


def train_run(cfg: RunConfig, scene_dir: str, out_dir: str) -> dict:
    """Train on the first (or configured) year's chips; keep the best epoch.

    Returns a summary dict; writes checkpoint.fsnw and training_log.csv.
    """
    manifest = load_scene_manifest(scene_dir)
    train_year = cfg.train.train_year or manifest["years"][0]
    if train_year not in manifest["chips"]:
        raise DataError(f"scene has no chips for training year '{train_year}'")
    pairs = _load_chip_pairs(scene_dir, manifest, train_year)
    if not pairs:
        raise DataError(f"scene has zero chips for year '{train_year}'")

    stride = max(2, round(1.0 / cfg.train.val_fraction))
    val_idx = set(range(0, len(pairs), stride))
    train_pairs = [p for i, p in enumerate(pairs) if i not in val_idx]
    val_pairs = [p for i, p in enumerate(pairs) if i in val_idx]
    if not train_pairs or not val_pairs:
        raise DataError("train/validation split left an empty side; add chips")

    stats: NormStats | None = None
    if cfg.norm.locality == "global":
        stats = compute_stats((c for c, _ in train_pairs), cfg.norm)

    dataset_weights: ClassWeights | None = None
    if cfg.loss.weight_scope == "dataset":
        dataset_weights = dynamic_class_weights(
            [m for _, m in train_pairs], cap=cfg.loss.weight_cap
        )

    rate = 0.0 if cfg.train.dropout_regime == "none" else cfg.arch.dropout_rate_train
    params = init_params(cfg.arch, seed=cfg.seed, dtype=np.float32)
    state = cfg.optimizer.make_state()

    val_inputs = [
        normalize_chip(c, cfg.norm, stats).data.astype(np.float32) for c, _ in val_pairs
    ]
    val_masks = [m for _, m in val_pairs]

    log_rows = []
    best = {"iou": -1.0, "epoch": -1, "tensors": {k: v.copy() for k, v in params.tensors.items()}}
    if cfg.train.epochs == 0:
        best["iou"] = _batch_iou(params, val_inputs, val_masks)
        best["epoch"] = 0

    for epoch in range(cfg.train.epochs):
        lr = lr_at(cfg.schedule, epoch)
        order = stream(cfg.seed, DOMAIN_ORDER, epoch).permutation(len(train_pairs))
        epoch_losses = []
        for step, start in enumerate(range(0, len(order), cfg.train.batch_size)):
            idx = order[start : start + cfg.train.batch_size]
            xs, ts = [], []
            for i in idx:
                chip, mask = train_pairs[int(i)]
                chip, mask = augment_pair(
                    chip, mask, cfg.augment, stream(cfg.seed, DOMAIN_AUGMENT, epoch, int(i))
                )
                chip = normalize_chip(chip, cfg.norm, stats)
                xs.append(chip.data.astype(np.float32))
                ts.append(mask.data)
            x = np.stack(xs)
            targets = np.stack(ts)
            if cfg.loss.weight_scope == "batch":
                weights = dynamic_class_weights(targets, cap=cfg.loss.weight_cap)
            else:
                weights = dataset_weights
            grad_fn = _loss_and_grads(
                cfg, params, x, targets, weights, rate, (cfg.seed, DOMAIN_DROPOUT, epoch, step)
            )
            if cfg.optimizer.kind == "sam":
                loss_box = {}

                def sam_grads(tensors):
                    loss, grads = grad_fn(tensors)
                    loss_box.setdefault("loss", loss)
                    return grads

                tensors, state = sam_step(params.tensors, sam_grads, state, lr)
                loss = loss_box["loss"]
            else:
                loss, grads = grad_fn(params.tensors)
                tensors, state = optimizer_step(params.tensors, grads, state, lr)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {step}")
            params = NetworkParams(cfg.arch, tensors)
            epoch_losses.append(loss)
        val_iou = _batch_iou(params, val_inputs, val_masks)
        log_rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "val_iou": val_iou,
            }
        )
        if val_iou > best["iou"]:
            best = {
                "iou": val_iou,
                "epoch": epoch,
                "tensors": {k: v.copy() for k, v in params.tensors.items()},
            }

    meta = {
        "arch": cfg.arch.to_json(),
        "norm": cfg.norm.code,
        "norm_stats": stats.to_json() if stats is not None else None,
        "dropout_regime": cfg.train.dropout_regime,
        "train_year": train_year,
        "best_epoch": best["epoch"],
        "best_val_iou": best["iou"],
        "seed": cfg.seed,
    }
    containers.write_checkpoint(os.path.join(out_dir, "checkpoint.fsnw"), best["tensors"], meta)
    with open(os.path.join(out_dir, "training_log.csv"), "w") as fh:
        fh.write("epoch,lr,train_loss,val_iou\n")
        for row in log_rows:
            fh.write(f"{row['epoch']},{row['lr']:.8f},{row['train_loss']:.8f},{row['val_iou']:.8f}\n")
    return meta


def load_checkpoint(path: str, arch: ArchSpec) -> tuple[NetworkParams, dict]:
    tensors, meta = containers.read_checkpoint(path)
    stored = meta.get("arch")
    if stored != arch.to_json():
        raise CheckpointError(
            f"checkpoint architecture {stored} does not match configured {arch.to_json()}"
        )
    params = NetworkParams(arch, {k: v.astype(np.float32) for k, v in tensors.items()})
    expected = [name for name, _ in arch.shape_table()]
    if list(params.tensors) != expected:
        raise CheckpointError("checkpoint layer table does not match the architecture")
    return params, meta


# ---------------------------------------------------------------------------
# Prediction.


def _effective_mc(cfg: RunConfig, year_index: int) -> McConfig:
    base = cfg.mc
    if cfg.train.dropout_regime != "mc":
        base = replace(base, trials=1, inference_dropout_rate=0.0)
    return replace(base, seed=derive_seed(cfg.seed, DOMAIN_MC, year_index))


def _gray_png(values: np.ndarray, path: str) -> None:
    from PIL import Image

    img = (np.clip(values, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def predict_run(cfg: RunConfig, checkpoint_path: str, scene_dir: str, out_dir: str) -> dict:
    """Predict every scene year with the trained ensemble; persist layers."""
    params, meta = load_checkpoint(checkpoint_path, cfg.arch)
    manifest = load_scene_manifest(scene_dir)
    stats = NormStats.from_json(meta["norm_stats"]) if meta.get("norm_stats") else None
    scheme = NormScheme.from_code(meta["norm"]) if meta.get("norm") else cfg.norm
    train_year = meta.get("train_year") or manifest["years"][0]

    reference_raw: Chip | None = None
    if cfg.histogram_match_to_train:
        reference_raw = containers.read_chip(
            os.path.join(scene_dir, manifest["imagery"][train_year])
        )

    summary: dict = {"years": {}, "checkpoint_meta": {k: v for k, v in meta.items() if k != "norm_stats"}}
    for yi, year in enumerate(manifest["years"]):
        raw = containers.read_chip(os.path.join(scene_dir, manifest["imagery"][year]))
        if reference_raw is not None and year != train_year:
            from .normalize import histogram_match

            raw = histogram_match(raw, reference_raw)
        chip = normalize_chip(raw, scheme, stats)
        mc_cfg = _effective_mc(cfg, yi)
        out = predict_scene(params, chip.with_data(chip.data.astype(np.float32)), cfg.tiles, mc_cfg)
        ydir = os.path.join(out_dir, year)
        os.makedirs(ydir)
        containers.write_chip(os.path.join(ydir, "mean.fsch"), Chip(out.mean_probs, year=year))
        containers.write_chip(os.path.join(ydir, "std.fsch"), Chip(out.std_probs, year=year))
        containers.write_chip(
            os.path.join(ydir, "entropy.fsch"), Chip(out.entropy[None], year=year)
        )
        containers.write_chip(
            os.path.join(ydir, "mutual_info.fsch"), Chip(out.mutual_info[None], year=year)
        )
        hardened = LabelMask(out.hardened.data, year=year, tile_id="scene")
        containers.write_mask(os.path.join(ydir, "hardened.fsmk"), hardened)
        _gray_png(out.mean_probs[INTERIOR], os.path.join(ydir, "quicklook_interior.png"))
        labeling.mask_to_png(hardened, os.path.join(ydir, "quicklook_mask.png"))
        summary["years"][year] = {
            "threshold_used": out.threshold_used,
            "interior_prob_range": out.interior_prob_range,
            "trials": mc_cfg.trials,
            "inference_dropout_rate": mc_cfg.inference_dropout_rate,
        }
    with open(os.path.join(out_dir, "prediction.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    return summary


# ---------------------------------------------------------------------------
# Evaluation.


def evaluate_run(
    cfg: RunConfig,
    prediction_dir: str,
    scene_dir: str,
    out_dir: str | None = None,
    run_id: str = "run",
    boundary_as: str = "negative",
    write_pngs: bool = True,
) -> list[evaluation.MetricsRow]:
    """Rows per (year, core tile) against the scene's reference labels."""
    manifest = load_scene_manifest(scene_dir)
    rows: list[evaluation.MetricsRow] = []
    core = cfg.tiles.core_size
    for year in manifest["years"]:
        pred_path = os.path.join(prediction_dir, year, "hardened.fsmk")
        if not os.path.exists(pred_path):
            raise DataError(f"prediction for year '{year}' missing at {pred_path}")
        pred = containers.read_mask(pred_path)
        ref = containers.read_mask(os.path.join(scene_dir, manifest["labels"][year]))
        h, w = ref.data.shape
        for r in range(h // core):
            for c in range(w // core):
                sl = np.s_[r * core : (r + 1) * core, c * core : (c + 1) * core]
                counts = evaluation.confusion_counts(
                    LabelMask(pred.data[sl]), LabelMask(ref.data[sl]), boundary_as=boundary_as
                )
                rows.append(
                    evaluation.metrics(
                        counts,
                        run_id=run_id,
                        norm_scheme=cfg.norm.code,
                        year=year,
                        tile_id=f"r{r}c{c}",
                    )
                )
        if out_dir and write_pngs:
            cats = evaluation.spatial_confusion(pred, ref, boundary_as=boundary_as)
            evaluation.confusion_to_png(cats, os.path.join(out_dir, f"confusion_{year}.png"))
    if out_dir:
        with open(os.path.join(out_dir, "rows.csv"), "w") as fh:
            fh.write(evaluation.rows_to_csv(rows))
        for group in ("run", "year", "tile"):
            with open(os.path.join(out_dir, f"by_{group}.csv"), "w") as fh:
                fh.write(evaluation.report(rows, group_by=group))
    return rows


# ---------------------------------------------------------------------------
# Ablation matrix.


_REGIME_CELLS = [
    {"name": "no_dropout_no_photo", "overrides": {"augment": {"enable_photometric": False}, "train": {"dropout_regime": "none"}}},
    {"name": "mc_dropout_no_photo", "overrides": {"augment": {"enable_photometric": False}, "train": {"dropout_regime": "mc"}}},
    {"name": "no_dropout_photo", "overrides": {"train": {"dropout_regime": "none"}}},
    {"name": "train_dropout_photo", "overrides": {"train": {"dropout_regime": "train"}}},
    {"name": "mc_dropout_photo", "overrides": {"train": {"dropout_regime": "mc"}}},
]

_AXIS_KEYS = ("normalization", "photometric", "dropout", "loss", "weight_scope")


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_cells(ablate_block: dict) -> list[dict]:
    """Explicit cell list, axes product, or the shipped 5-regime default."""
    if not ablate_block or (not ablate_block.get("cells") and not ablate_block.get("axes")):
        return [dict(c) for c in _REGIME_CELLS]
    if ablate_block.get("cells"):
        cells = []
        for c in ablate_block["cells"]:
            if "name" not in c:
                raise ConfigError("every ablation cell needs a name")
            cells.append({"name": c["name"], "overrides": c.get("overrides", {})})
        return cells
    axes = ablate_block["axes"]
    for k in axes:
        if k not in _AXIS_KEYS:
            raise ConfigError(f"unknown ablation axis '{k}' (allowed: {_AXIS_KEYS})")
    cells = [{"name": "", "overrides": {}}]
    def extend(cells, values, namer, overrider):
        out = []
        for cell in cells:
            for v in values:
                name = f"{cell['name']}_{namer(v)}" if cell["name"] else namer(v)
                out.append({"name": name, "overrides": _merge(cell["overrides"], overrider(v))})
        return out

    if "normalization" in axes:
        cells = extend(cells, axes["normalization"], lambda v: v, lambda v: {"normalization": v})
    if "photometric" in axes:
        cells = extend(
            cells, axes["photometric"],
            lambda v: "photo" if v else "nophoto",
            lambda v: {"augment": {"enable_photometric": bool(v)}},
        )
    if "dropout" in axes:
        cells = extend(
            cells, axes["dropout"],
            lambda v: f"drop-{v}",
            lambda v: {"train": {"dropout_regime": v}},
        )
    if "loss" in axes:
        cells = extend(cells, axes["loss"], lambda v: v, lambda v: {"loss": {"kind": v}})
    if "weight_scope" in axes:
        cells = extend(
            cells, axes["weight_scope"],
            lambda v: f"w-{v}",
            lambda v: {"loss": {"weight_scope": v}},
        )
    return cells


def _training_signature(resolved: dict) -> str:
    """Cells that differ only at inference share one training run."""
    relevant = {
        "seed": resolved.get("seed"),
        "scene": resolved.get("scene"),
        "normalization": resolved.get("normalization"),
        "augment": resolved.get("augment"),
        "arch": resolved.get("arch"),
        "loss": resolved.get("loss"),
        "optimizer": resolved.get("optimizer"),
        "schedule": resolved.get("schedule"),
        "train": dict(resolved.get("train", {})),
    }
    # the regime matters to training only through the dropout rate on/off
    regime = relevant["train"].get("dropout_regime", "mc")
    relevant["train"]["dropout_regime"] = "none" if regime == "none" else "active"
    return json.dumps(relevant, sort_keys=True)


def ablate_run(cfg: RunConfig, out_dir: str, config_builder) -> dict:
    """Train/predict/evaluate every matrix cell over one shared scene.

    config_builder(resolved_dict) -> RunConfig rebuilds a cell config from
    merged JSON (supplied by the CLI layer so preset resolution stays there).
    Failed cells are recorded and the bundle still completes.
    """
    cells = resolve_cells(cfg.ablate)
    scene_dir = os.path.join(out_dir, "scene")
    os.makedirs(scene_dir)
    simulate_run(cfg, scene_dir)

    trained: dict[str, str] = {}
    all_rows: list[evaluation.MetricsRow] = []
    cell_status: dict[str, dict] = {}
    for cell in cells:
        name = cell["name"]
        cell_dir = os.path.join(out_dir, "cells", name)
        try:
            resolved = _merge(cfg.resolved, cell["overrides"])
            cell_cfg = config_builder(resolved)
            cell_cfg.validate()
            signature = _training_signature(resolved)
            if signature not in trained:
                train_dir = os.path.join(cell_dir, "train")
                os.makedirs(train_dir)
                train_run(cell_cfg, scene_dir, train_dir)
                trained[signature] = os.path.join(train_dir, "checkpoint.fsnw")
            checkpoint = trained[signature]
            pred_dir = os.path.join(cell_dir, "predict")
            os.makedirs(pred_dir)
            predict_run(cell_cfg, checkpoint, scene_dir, pred_dir)
            eval_dir = os.path.join(cell_dir, "eval")
            os.makedirs(eval_dir)
            rows = evaluate_run(cell_cfg, pred_dir, scene_dir, eval_dir, run_id=name)
            all_rows.extend(rows)
            cell_status[name] = {"status": "ok", "checkpoint": os.path.relpath(checkpoint, out_dir)}
        except Exception as exc:  # record and continue; bundle completes
            cell_status[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    report_dir = os.path.join(out_dir, "reports")
    os.makedirs(report_dir)
    if all_rows:
        with open(os.path.join(report_dir, "rows.csv"), "w") as fh:
            fh.write(evaluation.rows_to_csv(all_rows))
        for group in ("run", "year", "tile"):
            with open(os.path.join(report_dir, f"by_{group}.csv"), "w") as fh:
                fh.write(evaluation.report(all_rows, group_by=group))
    failed = [n for n, s in cell_status.items() if s["status"] != "ok"]
    return {"cells": cell_status, "partial_results": bool(failed), "failed_cells": failed}
