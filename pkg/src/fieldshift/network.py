"""Compact width/depth-configurable U-Net with exact hand-derived backprop.

Encoder: ``depth`` stages of [conv3x3+ReLU, conv3x3+ReLU, dropout, maxpool2],
widths doubling from ``base_width``.  Bottleneck: two ReLU convs plus
dropout at ``base_width * 2**depth``.  Decoder mirrors the encoder with
[nearest-upsample x2, conv3x3 (linear), concat skip, conv3x3+ReLU, dropout].
A final 1x1 conv maps to class logits at full resolution, so the output
spatial dims always equal the input dims.

Dropout is inverted (kept activations scaled by 1/(1-rate)); the spatial
kind zeroes whole channels per sample, the standard kind individual
activations.  ``train`` mode returns a cache from which ``backward``
computes exact gradients for every parameter and for the input batch.
Convolutions run as im2col windows + one tensordot (GEMM) per layer, which
keeps the desk presets fast on a CPU without sacrificing exactness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .raster import Chip
from .rng import DOMAIN_INIT, stream

MODES = ("train", "eval", "mc")


@dataclass(frozen=True)
class ArchSpec:
    depth: int = 3
    base_width: int = 8
    in_bands: int = 4
    classes: int = 3
    dropout_rate_train: float = 0.15
    dropout_kind: str = "spatial"      # "spatial" | "standard"
    dropout_position: str = "block"    # "block" (after 2nd ReLU) | "each-conv"

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if not 0.0 <= self.dropout_rate_train < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout_rate_train}")
        if self.dropout_kind not in ("spatial", "standard"):
            raise ConfigError(f"unknown dropout kind '{self.dropout_kind}'")
        if self.dropout_position not in ("block", "each-conv"):
            raise ConfigError(f"unknown dropout position '{self.dropout_position}'")

    @property
    def downsample_factor(self) -> int:
        return 2**self.depth

    def widths(self) -> list[int]:
        """Encoder stage widths; the bottleneck uses base_width * 2**depth."""
        return [self.base_width * 2**i for i in range(self.depth)]

    def shape_table(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) pairs for every kernel and bias."""
        table: list[tuple[str, tuple[int, ...]]] = []
        widths = self.widths()
        bottleneck = self.base_width * 2**self.depth

        def conv(name: str, out_ch: int, in_ch: int, k: int = 3) -> None:
            table.append((f"{name}.w", (out_ch, in_ch, k, k)))
            table.append((f"{name}.b", (out_ch,)))

        in_ch = self.in_bands
        for i, w in enumerate(widths):
            conv(f"enc{i}.conv1", w, in_ch)
            conv(f"enc{i}.conv2", w, w)
            in_ch = w
        conv("bot.conv1", bottleneck, widths[-1])
        conv("bot.conv2", bottleneck, bottleneck)
        below = bottleneck
        for i in reversed(range(self.depth)):
            conv(f"dec{i}.up", widths[i], below)
            conv(f"dec{i}.fuse", widths[i], 2 * widths[i])
            below = widths[i]
        conv("head", self.classes, widths[0], k=1)
        return table

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.shape_table())

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "base_width": self.base_width,
            "in_bands": self.in_bands,
            "classes": self.classes,
            "dropout_rate_train": self.dropout_rate_train,
            "dropout_kind": self.dropout_kind,
            "dropout_position": self.dropout_position,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "ArchSpec":
        return cls(**blob)


@dataclass
class NetworkParams:
    arch: ArchSpec
    tensors: dict[str, np.ndarray]

    def param_count(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(arch: ArchSpec, seed: int, dtype=np.float32) -> NetworkParams:
    """He fan-in scaled Gaussian kernels, zero biases; deterministic in seed."""
    rng = stream(seed, DOMAIN_INIT)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in arch.shape_table():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = rng.normal(0.0, std, shape).astype(dtype)
    return NetworkParams(arch=arch, tensors=tensors)


# ---------------------------------------------------------------------------
# Primitive ops.  Each forward returns what its backward needs, nothing more.


def _windows3(xp: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, h2 - 2, w2 - 2, 3, 3), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )


def _conv3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.tensordot(_windows3(xp), w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], xp


def _conv3_backward(
    dout: np.ndarray, xp: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    win = _windows3(xp)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dpad = np.pad(dout, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dx = np.tensordot(_windows3(dpad), w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return dx.transpose(0, 3, 1, 2), dw, db


def _conv1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv1_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dw = np.tensordot(dout, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    db = dout.sum(axis=(0, 2, 3))
    dx = np.tensordot(dout, w[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = xr.argmax(axis=-1)
    return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = in_shape
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    return g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _upsample_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _dropout_mask(
    shape: tuple[int, ...], rate: float, kind: str, rng: np.random.Generator, dtype
) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    if kind == "spatial":
        keep = rng.random((shape[0], shape[1], 1, 1)) >= rate
    else:
        keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def softmax_grad_to_logits(probs: np.ndarray, grad_probs: np.ndarray, axis: int = 1) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = (grad_probs * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


# ---------------------------------------------------------------------------
# Network forward/backward.


@dataclass
class ForwardCache:
    """Everything backward needs, recorded in execution order."""

    x: np.ndarray
    conv_inputs: dict[str, np.ndarray] = field(default_factory=dict)   # padded inputs per conv
    relu_masks: dict[str, np.ndarray] = field(default_factory=dict)
    drop_masks: dict[str, np.ndarray | None] = field(default_factory=dict)
    pool_idx: dict[int, tuple[np.ndarray, tuple[int, ...]]] = field(default_factory=dict)
    head_input: np.ndarray | None = None


def _require_rng(rate: float, rng: np.random.Generator | None) -> None:
    if rate > 0.0 and rng is None:
        raise ConfigError("dropout is active but no RNG stream was supplied")


def forward(
    params: NetworkParams,
    batch: np.ndarray,
    mode: str = "eval",
    dropout_rate: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the network; returns (logits, cache) with cache only in train mode."""
    if mode not in MODES:
        raise ConfigError(f"unknown forward mode '{mode}'")
    arch = params.arch
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != arch.in_bands:
        raise DimensionError(
            f"batch must be (N, {arch.in_bands}, H, W), got {batch.shape}"
        )
    n, _, h, w = batch.shape
    factor = arch.downsample_factor
    if h % factor or w % factor:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by {factor}")
    if mode == "eval":
        rate = 0.0
    else:
        rate = arch.dropout_rate_train if dropout_rate is None else float(dropout_rate)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    _require_rng(rate, rng)

    t = params.tensors
    train = mode == "train"
    cache = ForwardCache(x=batch) if train else None
    each_conv = arch.dropout_position == "each-conv"

    def conv_relu(name: str, x: np.ndarray) -> np.ndarray:
        pre, xp = _conv3_forward(x, t[f"{name}.w"], t[f"{name}.b"])
        mask = pre > 0
        out = pre * mask
        if train:
            cache.conv_inputs[name] = xp
            cache.relu_masks[name] = mask
        return out

    def dropout(site: str, x: np.ndarray) -> np.ndarray:
        m = _dropout_mask(x.shape, rate, arch.dropout_kind, rng, x.dtype)
        if train:
            cache.drop_masks[site] = m
        return x if m is None else x * m

    skips: list[np.ndarray] = []
    hcur = batch
    for i in range(arch.depth):
        hcur = conv_relu(f"enc{i}.conv1", hcur)
        if each_conv:
            hcur = dropout(f"enc{i}.d1", hcur)
        hcur = conv_relu(f"enc{i}.conv2", hcur)
        hcur = dropout(f"enc{i}.d2", hcur)
        skips.append(hcur)
        pooled, idx = _pool_forward(hcur)
        if train:
            cache.pool_idx[i] = (idx, hcur.shape)
        hcur = pooled

    hcur = conv_relu("bot.conv1", hcur)
    if each_conv:
        hcur = dropout("bot.d1", hcur)
    hcur = conv_relu("bot.conv2", hcur)
    hcur = dropout("bot.d2", hcur)

    for i in reversed(range(arch.depth)):
        up = _upsample_forward(hcur)
        pre, xp = _conv3_forward(up, t[f"dec{i}.up.w"], t[f"dec{i}.up.b"])
        if train:
            cache.conv_inputs[f"dec{i}.up"] = xp
        hcur = np.concatenate([pre, skips[i]], axis=1)
        hcur = conv_relu(f"dec{i}.fuse", hcur)
        hcur = dropout(f"dec{i}.d", hcur)

    if train:
        cache.head_input = hcur
    logits = _conv1_forward(hcur, t["head.w"], t["head.b"])
    return logits, cache


def backward(
    params: NetworkParams, cache: ForwardCache | None, grad_logits: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of the train-mode forward pass.

    Returns (per-tensor gradients keyed like params.tensors, gradient w.r.t.
    the input batch).
    """
    if cache is None:
        raise StateError("backward requires the cache from a train-mode forward pass")
    arch = params.arch
    t = params.tensors
    grads = {name: np.zeros_like(tensor) for name, tensor in t.items()}
    each_conv = arch.dropout_position == "each-conv"

    def conv_relu_back(name: str, d: np.ndarray) -> np.ndarray:
        d = d * cache.relu_masks[name]
        dx, dw, db = _conv3_backward(d, cache.conv_inputs[name], t[f"{name}.w"])
        grads[f"{name}.w"] += dw
        grads[f"{name}.b"] += db
        return dx

    def dropout_back(site: str, d: np.ndarray) -> np.ndarray:
        m = cache.drop_masks.get(site)
        return d if m is None else d * m

    d, dw_head, db_head = _conv1_backward(grad_logits, cache.head_input, t["head.w"])
    grads["head.w"] += dw_head
    grads["head.b"] += db_head

    widths = arch.widths()
    skip_grads: dict[int, np.ndarray] = {}
    for i in range(arch.depth):  # decoder stages, shallowest first (reverse of forward tail)
        d = dropout_back(f"dec{i}.d", d)
        d = conv_relu_back(f"dec{i}.fuse", d)
        d_up_pre, d_skip = d[:, : widths[i]], d[:, widths[i] :]
        skip_grads[i] = d_skip
        dx_up, dw, db = _conv3_backward(d_up_pre, cache.conv_inputs[f"dec{i}.up"], t[f"dec{i}.up.w"])
        grads[f"dec{i}.up.w"] += dw
        grads[f"dec{i}.up.b"] += db
        d = _upsample_backward(dx_up)

    d = dropout_back("bot.d2", d)
    d = conv_relu_back("bot.conv2", d)
    if each_conv:
        d = dropout_back("bot.d1", d)
    d = conv_relu_back("bot.conv1", d)

    for i in reversed(range(arch.depth)):
        idx, shape = cache.pool_idx[i]
        d = _pool_backward(d, idx, shape)
        d = d + skip_grads[i]
        d = dropout_back(f"enc{i}.d2", d)
        d = conv_relu_back(f"enc{i}.conv2", d)
        if each_conv:
            d = dropout_back(f"enc{i}.d1", d)
        d = conv_relu_back(f"enc{i}.conv1", d)

    return grads, d


def predict_proba(
    params: NetworkParams,
    chip: Chip | np.ndarray,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-pixel class probabilities (classes, H, W) for one chip."""
    data = chip.data if isinstance(chip, Chip) else np.asarray(chip)
    mode = "eval" if dropout_rate == 0.0 else "mc"
    logits, _ = forward(params, data[None], mode=mode, dropout_rate=dropout_rate, rng=rng)
    return softmax(logits, axis=1)[0]
