"""MC-dropout ensembles, uncertainty layers, hardening, tiled scene inference.

Per-trial softmax probabilities are aggregated into mean, per-class std,
predictive entropy H(mean), and mutual information H(mean) - mean_t H(p_t).
Trial values are sorted per pixel before every reduction so the outputs are
exactly invariant to trial order.  A zero inference dropout rate takes the
degenerate single-pass path: std and mutual information are exactly zero.

Scene prediction tiles the raster into non-overlapping cores, feeds each
core's enlarged context window through the ensemble (reflection padding at
scene edges), and writes only core pixels to the mosaic, so the stitched
result is bit-identical to predicting each window independently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DegenerateStatsWarning, DimensionError
from .network import NetworkParams, forward, softmax
from .parallel import run_indexed
from .raster import BACKGROUND, INTERIOR, Chip, LabelMask
from .rng import DOMAIN_MC, derive_seed, stream

_EPS_CLAMP = 1e-12


@dataclass(frozen=True)
class McConfig:
    trials: int = 10
    inference_dropout_rate: float = 0.1
    aggregation: str = "mean"          # "mean" | "majority-vote"
    seed: int = 0
    threshold_policy: str = "fixed"    # "fixed" | "adaptive" | "argmax"
    fixed_threshold: float = 0.75

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not 0.0 <= self.inference_dropout_rate < 1.0:
            raise ConfigError(
                f"inference dropout rate must be in [0, 1), got {self.inference_dropout_rate}"
            )
        if self.aggregation not in ("mean", "majority-vote"):
            raise ConfigError(f"unknown aggregation '{self.aggregation}'")
        if self.threshold_policy not in ("fixed", "adaptive", "argmax"):
            raise ConfigError(f"unknown threshold policy '{self.threshold_policy}'")
        if not 0.0 <= self.fixed_threshold <= 1.0:
            raise ConfigError("fixed_threshold must be in [0, 1]")


@dataclass
class McEnsembleOutput:
    mean_probs: np.ndarray     # (K, H, W)
    std_probs: np.ndarray      # (K, H, W)
    entropy: np.ndarray        # (H, W), nats
    mutual_info: np.ndarray    # (H, W), nats
    hardened: LabelMask
    threshold_used: float
    interior_prob_range: float  # p99 - p1 of the interior probability layer


@dataclass(frozen=True)
class TileScheme:
    core_size: int
    input_size: int

    def __post_init__(self) -> None:
        if self.input_size < self.core_size:
            raise ConfigError(
                f"input_size {self.input_size} must be >= core_size {self.core_size}"
            )
        if (self.input_size - self.core_size) % 2 != 0:
            raise ConfigError("input_size - core_size must be even (symmetric overlap)")

    @property
    def overlap(self) -> int:
        return (self.input_size - self.core_size) // 2


def _entropy(probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """Shannon entropy in nats of a normalized distribution along axis."""
    total = probs.sum(axis=axis, keepdims=True)
    p = probs / np.maximum(total, _EPS_CLAMP)
    terms = np.where(p > 0, p * np.log(np.maximum(p, _EPS_CLAMP)), 0.0)
    return np.maximum(-terms.sum(axis=axis), 0.0)


def aggregate_trials(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(mean, std, entropy, mutual_info) from a (T, K, H, W) probability stack.

    Reductions run over per-pixel sorted values, which makes them exactly
    symmetric in the trials; mutual information is clamped into
    [0, entropy] to absorb floating point dust around the Jensen bound.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4:
        raise DimensionError(f"trial stack must be (T, K, H, W), got {stack.shape}")
    t = stack.shape[0]
    ordered = np.sort(stack, axis=0)
    mean = ordered.sum(axis=0) / t
    std = np.sqrt(((ordered - mean[None]) ** 2).sum(axis=0) / t)
    entropy = _entropy(mean, axis=0)
    k = stack.shape[1]
    entropy = np.minimum(entropy, np.log(k))
    trial_entropy = np.stack([_entropy(stack[i], axis=0) for i in range(t)])
    mean_trial_entropy = np.sort(trial_entropy, axis=0).sum(axis=0) / t
    mutual_info = np.clip(entropy - mean_trial_entropy, 0.0, entropy)
    return mean, std, entropy, mutual_info


def _otsu_threshold(interior_probs: np.ndarray, bins: int = 256) -> float | None:
    """Between-class-variance maximizing cut on the interior histogram.

    Plateaus are resolved to their midpoint; returns None when the histogram
    is degenerate (all mass in a single bin).
    """
    counts, edges = np.histogram(interior_probs.reshape(-1), bins=bins, range=(0.0, 1.0))
    total = counts.sum()
    if total == 0 or (counts > 0).sum() < 2:
        return None
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(counts)[:-1]
    w1 = total - w0
    sum0 = np.cumsum(counts * centers)[:-1]
    sum_total = (counts * centers).sum()
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, sum0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(valid, (sum_total - sum0) / np.maximum(w1, 1), 0.0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    best = sigma_b.max()
    if not np.isfinite(best):
        return None
    plateau = np.flatnonzero(sigma_b >= best - 1e-12 * max(abs(best), 1.0))
    cut = float(plateau.mean())
    return float(edges[int(round(cut)) + 1])


def harden(
    mean_probs: np.ndarray,
    policy: str = "fixed",
    threshold: float = 0.75,
) -> tuple[LabelMask, float]:
    """Probability maps to a discrete class mask.

    The interior class wins where its probability reaches the threshold;
    the remaining pixels take the argmax of the other classes.  The
    adaptive policy picks the threshold per scene by between-class variance
    on a 256-bin interior histogram, clamped to [0.3, 0.9], falling back to
    the fixed 0.75 on degenerate histograms.
    """
    probs = np.asarray(mean_probs)
    if probs.ndim != 3:
        raise DimensionError(f"mean_probs must be (K, H, W), got {probs.shape}")
    if policy == "argmax":
        data = probs.argmax(axis=0).astype(np.uint8)
        return LabelMask(data), float("nan")
    if policy == "adaptive":
        t = _otsu_threshold(probs[INTERIOR])
        if t is None:
            warnings.warn(
                "degenerate interior histogram; adaptive threshold fell back to 0.75",
                DegenerateStatsWarning,
            )
            t = 0.75
        t = float(np.clip(t, 0.3, 0.9))
    elif policy == "fixed":
        t = float(threshold)
    else:
        raise ConfigError(f"unknown hardening policy '{policy}'")
    interior = probs[INTERIOR] >= t
    others = np.delete(np.arange(probs.shape[0]), INTERIOR)
    rest = others[probs[others].argmax(axis=0)]
    data = np.where(interior, INTERIOR, rest).astype(np.uint8)
    return LabelMask(data), t


def _interior_range(mean_probs: np.ndarray) -> float:
    layer = mean_probs[INTERIOR].reshape(-1)
    return float(np.quantile(layer, 0.99) - np.quantile(layer, 0.01))


def mc_predict(params: NetworkParams, chip: Chip | np.ndarray, cfg: McConfig) -> McEnsembleOutput:
    """Run the MC-dropout ensemble on one chip/window."""
    data = chip.data if isinstance(chip, Chip) else np.asarray(chip)
    batch = data[None]
    rate = cfg.inference_dropout_rate
    trials: list[np.ndarray] = []
    if rate == 0.0:
        logits, _ = forward(params, batch, mode="eval")
        mean = softmax(logits, axis=1)[0].astype(np.float64)
        std = np.zeros_like(mean)
        entropy = np.minimum(_entropy(mean, axis=0), np.log(mean.shape[0]))
        mutual_info = np.zeros_like(entropy)
    else:
        def one_trial(t: int) -> np.ndarray:
            rng = stream(cfg.seed, DOMAIN_MC, t)
            logits, _ = forward(params, batch, mode="mc", dropout_rate=rate, rng=rng)
            return softmax(logits, axis=1)[0]

        trials = run_indexed(one_trial, cfg.trials)
        mean, std, entropy, mutual_info = aggregate_trials(np.stack(trials))

    if cfg.aggregation == "majority-vote" and trials:
        votes = np.zeros((params.arch.classes,) + mean.shape[1:], dtype=np.int32)
        threshold_used = float("nan")
        for probs_t in trials:
            mask_t, threshold_used = harden(probs_t, cfg.threshold_policy, cfg.fixed_threshold)
            for c in range(params.arch.classes):
                votes[c] += mask_t.data == c
        top = votes.max(axis=0)
        winner = votes.argmax(axis=0)
        ties = (votes == top[None]).sum(axis=0) > 1
        hardened = LabelMask(np.where(ties, BACKGROUND, winner).astype(np.uint8))
    else:
        hardened, threshold_used = harden(mean, cfg.threshold_policy, cfg.fixed_threshold)

    return McEnsembleOutput(
        mean_probs=mean,
        std_probs=std,
        entropy=entropy,
        mutual_info=mutual_info,
        hardened=hardened,
        threshold_used=threshold_used,
        interior_prob_range=_interior_range(mean),
    )


def window_seed(base_seed: int, row: int, col: int) -> int:
    """Per-window ensemble seed; exposed so per-window reruns can match."""
    return derive_seed(base_seed, row, col)


def predict_scene(
    params: NetworkParams,
    scene_imagery: Chip | np.ndarray,
    tiles: TileScheme,
    cfg: McConfig,
) -> McEnsembleOutput:
    """Overlap-tiled whole-scene ensemble prediction.

    Cores partition the scene exactly; each core is predicted from its
    enlarged input window (reflection padding where the window leaves the
    scene) under the window's own RNG stream, and only core pixels are
    written to the mosaic.  Hardening runs once on the stitched mean, so
    the adaptive policy sees the scene-wide histogram.
    """
    data = scene_imagery.data if isinstance(scene_imagery, Chip) else np.asarray(scene_imagery)
    if data.ndim != 3:
        raise DimensionError(f"scene imagery must be (bands, H, W), got {data.shape}")
    _, h, w = data.shape
    core = tiles.core_size
    if h % core or w % core:
        raise DimensionError(f"scene {h}x{w} is not divisible into {core}-pixel cores")
    factor = params.arch.downsample_factor
    if tiles.input_size % factor:
        raise DimensionError(
            f"tile input size {tiles.input_size} not divisible by network factor {factor}"
        )
    ov = tiles.overlap
    padded = np.pad(data, ((0, 0), (ov, ov), (ov, ov)), mode="reflect") if ov else data
    rows, cols = h // core, w // core
    k = params.arch.classes
    mean = np.empty((k, h, w))
    std = np.empty((k, h, w))
    entropy = np.empty((h, w))
    mutual_info = np.empty((h, w))

    def one_tile(index: int) -> tuple[int, int, McEnsembleOutput]:
        r, c = divmod(index, cols)
        window = padded[:, r * core : r * core + tiles.input_size, c * core : c * core + tiles.input_size]
        sub = replace(cfg, seed=window_seed(cfg.seed, r, c))
        return r, c, mc_predict(params, np.ascontiguousarray(window), sub)

    for r, c, out in run_indexed(one_tile, rows * cols):
        sl = np.s_[r * core : (r + 1) * core, c * core : (c + 1) * core]
        crop = np.s_[ov : ov + core, ov : ov + core]
        mean[(slice(None),) + sl] = out.mean_probs[(slice(None),) + crop]
        std[(slice(None),) + sl] = out.std_probs[(slice(None),) + crop]
        entropy[sl] = out.entropy[crop]
        mutual_info[sl] = out.mutual_info[crop]

    hardened, threshold_used = harden(mean, cfg.threshold_policy, cfg.fixed_threshold)
    return McEnsembleOutput(
        mean_probs=mean,
        std_probs=std,
        entropy=entropy,
        mutual_info=mutual_info,
        hardened=hardened,
        threshold_used=threshold_used,
        interior_prob_range=_interior_range(mean),
    )
