"""On-the-fly chip/mask augmentation.

Fixed stage order flip -> rotation -> resize -> photometric; each stage
fires independently with the configured probability and draws one mode
uniformly.  Geometric stages transform chip and mask identically (nearest
neighbor for the mask); photometric stages touch the chip only and clamp
to [0, 1] for reflectance-like inputs.  Everything is a pure function of
the supplied RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .raster import IGNORE, Chip, LabelMask

GEOMETRIC_KINDS = ("flip-h", "flip-v", "flip-diag", "rotate90k", "resize")
PHOTOMETRIC_KINDS = ("gamma", "gaussian-noise", "additive", "multiplicative")


@dataclass(frozen=True)
class AugmentConfig:
    apply_probability: float = 0.5
    flip_modes: tuple[str, ...] = ("horizontal", "vertical", "diagonal")
    rotation_angles: tuple[int, ...] = (90, 180, 270)
    resize_scale_range: tuple[float, float] = (0.8, 1.2)
    photometric_modes: tuple[str, ...] = PHOTOMETRIC_KINDS
    gamma_range: tuple[float, float] = (0.7, 1.4)
    noise_sigma: float = 0.02
    additive_range: tuple[float, float] = (-0.05, 0.05)
    multiplicative_range: tuple[float, float] = (0.9, 1.1)
    enable_photometric: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError(f"apply_probability must be in [0, 1], got {self.apply_probability}")
        for name in ("resize_scale_range", "gamma_range", "additive_range", "multiplicative_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} is empty: {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        for m in self.flip_modes:
            if m not in ("horizontal", "vertical", "diagonal"):
                raise ConfigError(f"unknown flip mode '{m}'")
        for a in self.rotation_angles:
            if a % 90 != 0 or a % 360 == 0:
                raise ConfigError(f"rotation angles must be right angles, got {a}")
        for m in self.photometric_modes:
            if m not in PHOTOMETRIC_KINDS:
                raise ConfigError(f"unknown photometric mode '{m}'")


def _resize_plane(plane: np.ndarray, out_h: int, out_w: int, nearest: bool) -> np.ndarray:
    """Separable resize; at scale 1.0 the sample grid is the identity."""
    in_h, in_w = plane.shape
    rows = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    cols = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    if nearest:
        return plane[np.floor(rows + 0.5).astype(int)][:, np.floor(cols + 0.5).astype(int)]
    r0 = np.floor(rows).astype(int)
    r1 = np.minimum(r0 + 1, in_h - 1)
    wr = (rows - r0)[:, None]
    c0 = np.floor(cols).astype(int)
    c1 = np.minimum(c0 + 1, in_w - 1)
    wc = (cols - c0)[None, :]
    top = plane[r0][:, c0] * (1 - wc) + plane[r0][:, c1] * wc
    bot = plane[r1][:, c0] * (1 - wc) + plane[r1][:, c1] * wc
    return top * (1 - wr) + bot * wr


def _fit_back(arr: np.ndarray, out_h: int, out_w: int, fill_ignore: bool) -> np.ndarray:
    """Center-crop or center-pad the last two axes back to (out_h, out_w).

    Masks pad with the ignore code, imagery pads by edge reflection so no
    out-of-range values appear.
    """
    h, w = arr.shape[-2:]

    def crop(a, size, axis):
        start = (a.shape[axis] - size) // 2
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        return a[tuple(sl)]

    if h > out_h:
        arr = crop(arr, out_h, arr.ndim - 2)
    if w > out_w:
        arr = crop(arr, out_w, arr.ndim - 1)
    h, w = arr.shape[-2:]
    pad_h, pad_w = out_h - h, out_w - w
    if pad_h or pad_w:
        spec = [(0, 0)] * (arr.ndim - 2) + [
            (pad_h // 2, pad_h - pad_h // 2),
            (pad_w // 2, pad_w - pad_w // 2),
        ]
        if fill_ignore:
            arr = np.pad(arr, spec, mode="constant", constant_values=IGNORE)
        else:
            arr = np.pad(arr, spec, mode="reflect")
    return arr


def geometric_transform(
    chip: Chip, mask: LabelMask, kind: str, parameter: float | int | None = None
) -> tuple[Chip, LabelMask]:
    """One geometric stage applied identically to chip and mask.

    rotate90k takes the number of 90-degree turns as parameter; resize takes
    the scale factor and restores the original size by center crop or pad.
    """
    if kind not in GEOMETRIC_KINDS:
        raise ConfigError(f"unknown geometric transform '{kind}'")
    img, lab = chip.data, mask.data
    if kind == "flip-h":
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    elif kind == "flip-v":
        img, lab = img[:, ::-1, :], lab[::-1, :]
    elif kind == "flip-diag":
        img, lab = img.transpose(0, 2, 1), lab.T
    elif kind == "rotate90k":
        k = int(parameter if parameter is not None else 1)
        img = np.rot90(img, k=k, axes=(1, 2))
        lab = np.rot90(lab, k=k)
    else:  # resize
        scale = float(parameter if parameter is not None else 1.0)
        if scale <= 0:
            raise ConfigError(f"resize scale must be positive, got {scale}")
        h, w = lab.shape
        new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
        img = np.stack([_resize_plane(band, new_h, new_w, nearest=False) for band in img])
        lab = _resize_plane(lab, new_h, new_w, nearest=True)
        img = _fit_back(img, h, w, fill_ignore=False)
        lab = _fit_back(lab, h, w, fill_ignore=True)
    return (
        chip.with_data(np.ascontiguousarray(img)),
        LabelMask(np.ascontiguousarray(lab), mask.tile_id, mask.year, mask.offset),
    )


def photometric_transform(
    chip: Chip,
    kind: str,
    parameter: float | np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Chip:
    """One photometric stage on the chip only; output clamped to [0, 1].

    gamma/additive/multiplicative accept a scalar or per-band parameter;
    gaussian-noise takes sigma as parameter and draws per pixel from rng.
    """
    if kind not in PHOTOMETRIC_KINDS:
        raise ConfigError(f"unknown photometric transform '{kind}'")
    data = chip.data.astype(np.float64, copy=True)
    if kind == "gamma":
        if data.min() < 0:
            raise DataError("gamma correction requires non-negative chip values")
        gamma = 1.0 if parameter is None else parameter
        data = np.power(data, np.reshape(np.broadcast_to(gamma, (chip.band_count,)), (-1, 1, 1)))
    elif kind == "gaussian-noise":
        sigma = float(parameter) if parameter is not None else 0.0
        if sigma > 0:
            if rng is None:
                raise ConfigError("gaussian-noise requires an RNG stream")
            data = data + rng.normal(0.0, sigma, data.shape)
    elif kind == "additive":
        c = 0.0 if parameter is None else parameter
        data = data + np.reshape(np.broadcast_to(c, (chip.band_count,)), (-1, 1, 1))
    else:  # multiplicative
        m = 1.0 if parameter is None else parameter
        data = data * np.reshape(np.broadcast_to(m, (chip.band_count,)), (-1, 1, 1))
    np.clip(data, 0.0, 1.0, out=data)
    return chip.with_data(data.astype(chip.data.dtype, copy=False))


def augment_pair(
    chip: Chip, mask: LabelMask, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[Chip, LabelMask]:
    """Run the full stage chain with independent per-stage gates."""
    cfg.validate()
    if chip.data.shape[1:] != mask.data.shape:
        raise DimensionError(
            f"chip {chip.data.shape[1:]} and mask {mask.data.shape} are not aligned"
        )
    # flip
    if rng.random() < cfg.apply_probability and cfg.flip_modes:
        mode = cfg.flip_modes[rng.integers(len(cfg.flip_modes))]
        kind = {"horizontal": "flip-h", "vertical": "flip-v", "diagonal": "flip-diag"}[mode]
        chip, mask = geometric_transform(chip, mask, kind)
    # rotation
    if rng.random() < cfg.apply_probability and cfg.rotation_angles:
        angle = cfg.rotation_angles[rng.integers(len(cfg.rotation_angles))]
        chip, mask = geometric_transform(chip, mask, "rotate90k", angle // 90)
    # resize
    if rng.random() < cfg.apply_probability:
        scale = rng.uniform(*cfg.resize_scale_range)
        chip, mask = geometric_transform(chip, mask, "resize", scale)
    # photometric
    if cfg.enable_photometric and rng.random() < cfg.apply_probability and cfg.photometric_modes:
        kind = cfg.photometric_modes[rng.integers(len(cfg.photometric_modes))]
        if kind == "gamma":
            chip = photometric_transform(chip, kind, rng.uniform(*cfg.gamma_range))
        elif kind == "gaussian-noise":
            chip = photometric_transform(chip, kind, cfg.noise_sigma, rng)
        elif kind == "additive":
            shifts = rng.uniform(*cfg.additive_range, size=chip.band_count)
            chip = photometric_transform(chip, kind, shifts)
        else:
            factors = rng.uniform(*cfg.multiplicative_range, size=chip.band_count)
            chip = photometric_transform(chip, kind, factors)
    return chip, mask
