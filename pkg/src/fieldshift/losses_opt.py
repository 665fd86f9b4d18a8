"""Segmentation losses, dynamic class weights, optimizers, and LR schedule.

The Tversky-focal loss pools its per-class overlap sums over the whole
batch (per-sample pooling available for ablations) and ignores the masked
pixels exactly: perturbing probabilities at ignored pixels changes neither
the value nor any gradient component.  Both losses return analytic
gradients with respect to the probabilities; chaining through the softmax
is the caller's job (see network.softmax_grad_to_logits).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericFloorWarning, StatsError, TrainingError
from .raster import CLASS_COUNT, IGNORE, LabelMask

_PROB_TOL = 1e-4
_CE_FLOOR = 1e-12


@dataclass(frozen=True)
class TflConfig:
    alpha: float = 0.65           # false-negative weight
    beta: float = 0.35            # false-positive weight
    gamma: float = 0.9            # focal exponent
    smooth: float = 1e-6
    inverse_gamma: bool = False   # use (1 - TI)^(1/gamma) instead of (1 - TI)^gamma
    per_sample: bool = False      # pool per sample then average
    relax_sum: bool = False       # allow alpha + beta != 1

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if not self.relax_sum and abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ConfigError(f"alpha + beta must equal 1 (got {self.alpha + self.beta}); set relax_sum to override")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.smooth < 0:
            raise ConfigError("smooth must be non-negative")

    @property
    def exponent(self) -> float:
        return (1.0 / self.gamma) if self.inverse_gamma else self.gamma


@dataclass
class ClassWeights:
    """Raw inverse-frequency weights (1.0 each when the batch is balanced)."""

    weights: np.ndarray
    cap: float = 100.0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if (self.weights < 0).any() or not np.isfinite(self.weights).all():
            raise ConfigError("class weights must be finite and non-negative")

    def normalized(self) -> np.ndarray:
        """Rescaled so the weights sum to the class count."""
        total = self.weights.sum()
        if total == 0:
            return np.full_like(self.weights, 1.0)
        return self.weights * (len(self.weights) / total)


def dynamic_class_weights(
    targets, class_count: int = CLASS_COUNT, cap: float = 100.0
) -> ClassWeights:
    """Inverse-frequency weights w_c = T / (K * n_c) over non-ignore pixels.

    Classes absent from the batch get the cap.  Accepts a batch array or a
    list of LabelMask.
    """
    if isinstance(targets, (list, tuple)):
        arrays = [t.data if isinstance(t, LabelMask) else np.asarray(t) for t in targets]
        flat = np.concatenate([a.reshape(-1) for a in arrays]) if arrays else np.empty(0, np.uint8)
    else:
        flat = np.asarray(targets).reshape(-1)
    flat = flat[flat != IGNORE]
    if flat.size == 0:
        raise StatsError("cannot derive class weights: batch is entirely ignored")
    counts = np.bincount(flat, minlength=class_count)[:class_count].astype(np.float64)
    total = counts.sum()
    weights = np.full(class_count, float(cap))
    present = counts > 0
    weights[present] = np.minimum(total / (class_count * counts[present]), cap)
    return ClassWeights(weights=weights, cap=cap)


def _prep(probs: np.ndarray, targets: np.ndarray, ignore_mask: np.ndarray | None):
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.ndim != 4:
        raise DataError(f"probs must be (N, K, H, W), got shape {probs.shape}")
    if targets.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise DataError(f"targets shape {targets.shape} does not match probs {probs.shape}")
    if ignore_mask is None:
        ignore_mask = targets == IGNORE
    else:
        ignore_mask = np.asarray(ignore_mask, dtype=bool)
        if ignore_mask.shape != targets.shape:
            raise DataError("ignore_mask shape does not match targets")
    sums = probs.sum(axis=1)
    if np.abs(sums[~ignore_mask] - 1.0).max(initial=0.0) > _PROB_TOL:
        raise DataError("probabilities are not normalized per pixel (beyond 1e-4)")
    valid = ~ignore_mask
    if not valid.any():
        raise StatsError("loss requested over an entirely ignored batch")
    return probs, targets, valid


def _one_hot(targets: np.ndarray, valid: np.ndarray, classes: int) -> np.ndarray:
    g = np.zeros(targets.shape + (classes,), dtype=np.float64)
    safe = np.where(valid, targets, 0)
    np.put_along_axis(g, safe[..., None], 1.0, axis=-1)
    g[~valid] = 0.0
    return np.moveaxis(g, -1, 1)  # (N, K, H, W)


def _resolve_weights(weights, classes: int) -> np.ndarray:
    if weights is None:
        return np.ones(classes)
    if isinstance(weights, ClassWeights):
        w = weights.weights
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape != (classes,):
        raise DataError(f"expected {classes} class weights, got shape {w.shape}")
    return w


def tversky_focal_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    ignore_mask: np.ndarray | None = None,
    cfg: TflConfig | None = None,
    weights=None,
) -> tuple[float, np.ndarray]:
    """Focal Tversky loss over one-vs-rest class indices.

    Per class c, with sums over non-ignored pixels (pooled over the batch
    unless cfg.per_sample):

        TI_c = (sum(p*g) + eps) / (sum(p*g) + alpha*sum((1-p)*g) + beta*sum(p*(1-g)) + eps)
        loss = sum_c w_c * (1 - TI_c)^exponent

    Returns the scalar loss and its exact gradient w.r.t. probs (zero at
    ignored pixels).  At TI_c == 1 the focal factor's derivative is defined
    as 0 so perfect predictions keep a finite gradient.
    """
    cfg = cfg or TflConfig()
    probs, targets, valid = _prep(probs, targets, ignore_mask)
    n, k = probs.shape[:2]
    g = _one_hot(targets, valid, k)
    v = valid[:, None, :, :]
    p = probs.astype(np.float64)
    w = _resolve_weights(weights, k)
    eps = cfg.smooth
    exp = cfg.exponent

    if cfg.per_sample:
        axes = (2, 3)
    else:
        axes = (0, 2, 3)
    tp = (p * g * v).sum(axis=axes)
    fn = ((1.0 - p) * g * v).sum(axis=axes)
    fp = (p * (1.0 - g) * v).sum(axis=axes)
    num = tp + eps
    den = tp + cfg.alpha * fn + cfg.beta * fp + eps
    ti = num / den
    u = 1.0 - ti
    focal = np.power(u, exp)

    u_safe = np.where(u > 0, u, 1.0)  # focal derivative defined as 0 at TI == 1
    focal_deriv = np.where(u > 0, exp * np.power(u_safe, exp - 1.0), 0.0)
    if cfg.per_sample:
        loss = float((focal * w[None, :]).sum(axis=1).mean())
        outer = focal_deriv * w[None, :] / n
        num_b = num[:, :, None, None]
        den_b = den[:, :, None, None]
        outer_b = outer[:, :, None, None]
    else:
        loss = float((focal * w).sum())
        outer = focal_deriv * w
        num_b = num[None, :, None, None]
        den_b = den[None, :, None, None]
        outer_b = outer[None, :, None, None]

    # dTI/dp = (g*den - num*(g - alpha*g + beta*(1-g))) / den^2, per pixel
    dden = g - cfg.alpha * g + cfg.beta * (1.0 - g)
    dti = (g * den_b - num_b * dden) / (den_b**2)
    grad = (-outer_b) * dti * v
    return loss, grad


def soft_dice_loss(probs, targets, ignore_mask=None, weights=None) -> tuple[float, np.ndarray]:
    """Soft Dice as the alpha=beta=0.5, gamma=1 special case of the TFL."""
    cfg = TflConfig(alpha=0.5, beta=0.5, gamma=1.0)
    return tversky_focal_loss(probs, targets, ignore_mask, cfg, weights)


def weighted_ce_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    ignore_mask: np.ndarray | None = None,
    weights=None,
) -> tuple[float, np.ndarray]:
    """Mean over non-ignore pixels of w_target * (-log p_target).

    Probabilities below 1e-12 at target pixels are clamped (with a
    NumericFloorWarning); the gradient uses the clamped value.
    """
    probs, targets, valid = _prep(probs, targets, ignore_mask)
    n, k = probs.shape[:2]
    w = _resolve_weights(weights, k)
    g = _one_hot(targets, valid, k)
    p = probs.astype(np.float64)

    safe_t = np.where(valid, targets, 0)
    p_target = np.take_along_axis(p, safe_t[:, None], axis=1)[:, 0]
    floored = valid & (p_target < _CE_FLOOR)
    if floored.any():
        warnings.warn(
            f"{int(floored.sum())} target probabilities clamped at {_CE_FLOOR}", NumericFloorWarning
        )
    p_clamped = np.maximum(p_target, _CE_FLOOR)
    w_pix = w[safe_t] * valid
    m = int(valid.sum())
    loss = float((w_pix * -np.log(p_clamped)).sum() / m)

    grad = np.zeros_like(p)
    contrib = -w_pix / (p_clamped * m)
    np.put_along_axis(grad, safe_t[:, None], (contrib * valid)[:, None], axis=1)
    grad *= g  # zero at non-target channels and ignored pixels
    return loss, grad


# ---------------------------------------------------------------------------
# LR schedule and optimizers.


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 0.003
    power: float = 0.8
    total_epochs: int = 120

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.power <= 0:
            raise ConfigError("power must be positive")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Polynomial decay lr = initial * (1 - epoch/total)^power."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise ConfigError(
            f"epoch {epoch} outside the schedule range [0, {schedule.total_epochs}]"
        )
    return schedule.initial_lr * (1.0 - epoch / schedule.total_epochs) ** schedule.power


OPT_KINDS = ("sgd", "momentum", "nesterov", "adam", "sam")


@dataclass
class OptState:
    kind: str = "nesterov"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.05          # SAM neighborhood radius
    inner_kind: str = "nesterov"
    buffers: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        if self.kind not in OPT_KINDS:
            raise ConfigError(f"unknown optimizer '{self.kind}'")
        if self.kind == "sam" and self.inner_kind not in ("sgd", "momentum", "nesterov", "adam"):
            raise ConfigError(f"unsupported SAM inner optimizer '{self.inner_kind}'")


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in '{name}'")


def _apply_update(params: dict, grads: dict, state: OptState, lr: float, kind: str) -> dict:
    out = {}
    for name, w_arr in params.items():
        g = grads[name]
        buf = state.buffers.setdefault(name, {})
        if kind == "sgd":
            out[name] = w_arr - lr * g
        elif kind in ("momentum", "nesterov"):
            v = buf.get("v")
            v = g if v is None else state.momentum * v + g
            buf["v"] = v
            if kind == "nesterov":
                out[name] = w_arr - lr * (g + state.momentum * v)
            else:
                out[name] = w_arr - lr * v
        elif kind == "adam":
            m = buf.get("m", np.zeros_like(w_arr))
            v = buf.get("v2", np.zeros_like(w_arr))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            buf["m"], buf["v2"] = m, v
            t = state.step + 1
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            out[name] = w_arr - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            raise ConfigError(f"unknown optimizer '{kind}'")
    return out


def optimizer_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState, lr: float
) -> tuple[dict[str, np.ndarray], OptState]:
    """One update; pure in params (a fresh dict of arrays is returned)."""
    if set(params) != set(grads):
        raise DataError("params and grads must share the same keys")
    _check_finite(grads)
    if state.kind == "sam":
        raise ConfigError("SAM requires sam_step with a gradient function")
    out = _apply_update(params, grads, state, lr, state.kind)
    state.step += 1
    return out, state


def sam_step(
    params: dict[str, np.ndarray], grad_fn, state: OptState, lr: float
) -> tuple[dict[str, np.ndarray], OptState]:
    """Sharpness-aware step: perturb by rho * g/||g||, re-grade, update.

    With a vanishing first gradient the perturbation is skipped and the
    inner optimizer runs on the plain gradient.
    """
    g1 = grad_fn(params)
    _check_finite(g1)
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in g1.values())))
    if norm == 0.0 or state.rho == 0.0:
        out = _apply_update(params, g1, state, lr, state.inner_kind)
        state.step += 1
        return out, state
    scale = state.rho / norm
    perturbed = {name: w_arr + scale * g1[name] for name, w_arr in params.items()}
    g2 = grad_fn(perturbed)
    _check_finite(g2)
    out = _apply_update(params, g2, state, lr, state.inner_kind)
    state.step += 1
    return out, state
