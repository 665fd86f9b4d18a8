"""Synthetic multi-year agricultural scenes with controllable covariate shift.

The base year draws a Voronoi partition of Poisson-sampled points and marks
cells as fields until the requested coverage is met; later years churn a
fraction of the fields in and out.  Imagery is reflectance-like in [0, 1]:
low-frequency background texture plus per-field reflectance jitter, pushed
through a per-year acquisition transform (optional smoothing, per-band
affine brightness shift, additive Gaussian noise).  Everything is a pure
function of the config seed, with per-year RNG streams so appending a year
never perturbs earlier years.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import Voronoi

from . import labeling
from .errors import ConfigError, DimensionError
from .raster import IGNORE, Chip, LabelMask
from .rng import DOMAIN_BASE, DOMAIN_LAYOUT, DOMAIN_NOISE, stream


@dataclass(frozen=True)
class YearShift:
    """Per-year acquisition model: brightness drift plus sensor noise.

    ``band_mean_offset`` and ``band_std_scale`` encode the per-band mean/std
    drift of the year's brightness distribution; ``acquisition_smoothing_px``
    models a compositing method that low-pass filters the imagery (used for
    the first simulated year in the shipped presets).
    """

    year_tag: str
    band_mean_offset: tuple[float, ...]
    band_std_scale: tuple[float, ...]
    noise_sigma: float = 0.0
    acquisition_smoothing_px: float = 0.0

    def validate(self, band_count: int) -> None:
        if len(self.band_mean_offset) != band_count or len(self.band_std_scale) != band_count:
            raise ConfigError(
                f"year '{self.year_tag}': shift vectors must have {band_count} entries"
            )
        if any(s <= 0 for s in self.band_std_scale):
            raise ConfigError(f"year '{self.year_tag}': band_std_scale must be strictly positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"year '{self.year_tag}': noise_sigma must be non-negative")
        if self.acquisition_smoothing_px < 0:
            raise ConfigError(f"year '{self.year_tag}': smoothing must be non-negative")


def identity_shift(year_tag: str, band_count: int = 4) -> YearShift:
    return YearShift(year_tag, (0.0,) * band_count, (1.0,) * band_count)


@dataclass(frozen=True)
class SceneConfig:
    scene_size_px: int
    years: tuple[YearShift, ...]
    seed: int
    band_count: int = 4
    field_density: float = 0.35
    mean_field_diameter_px: int = 28
    churn_fraction: float = 0.10
    field_gap_px: float = 1.0
    background_reflectance: tuple[float, ...] = (0.30, 0.31, 0.27, 0.42)
    field_reflectance: tuple[float, ...] = (0.24, 0.28, 0.22, 0.66)
    background_texture_amp: float = 0.045
    field_jitter: float = 0.035
    boundary_thickness_px: int = 2

    def validate(self) -> None:
        if self.scene_size_px < 64:
            raise ConfigError(f"scene_size_px must be >= 64, got {self.scene_size_px}")
        if not 0.0 <= self.field_density <= 1.0:
            raise ConfigError(f"field_density must be in [0, 1], got {self.field_density}")
        if not 0.0 <= self.churn_fraction <= 1.0:
            raise ConfigError(f"churn_fraction must be in [0, 1], got {self.churn_fraction}")
        if self.mean_field_diameter_px < 4:
            raise ConfigError(
                f"mean_field_diameter_px must be >= 4, got {self.mean_field_diameter_px}"
            )
        if self.band_count < 1:
            raise ConfigError(f"band_count must be >= 1, got {self.band_count}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative 64-bit integer")
        if not self.years:
            raise ConfigError("config must declare at least one year")
        tags = [y.year_tag for y in self.years]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"year tags must be unique, got {tags}")
        if len(self.background_reflectance) != self.band_count:
            raise ConfigError("background_reflectance length must equal band_count")
        if len(self.field_reflectance) != self.band_count:
            raise ConfigError("field_reflectance length must equal band_count")
        for y in self.years:
            y.validate(self.band_count)


@dataclass
class Scene:
    """Immutable simulation product: per-year imagery and field polygons."""

    imagery: dict[str, Chip]
    field_polygons: dict[str, list[np.ndarray]]
    config: SceneConfig


# ---------------------------------------------------------------------------
# Geometry helpers (Voronoi cells are convex, which keeps clipping exact).


def _clip_halfplane(poly: np.ndarray, point: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip keeping the side where (v - point).normal >= 0."""
    out: list[np.ndarray] = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        da = float(np.dot(a - point, normal))
        db = float(np.dot(b - point, normal))
        if da >= 0:
            out.append(a)
        if (da >= 0) != (db >= 0):
            t = da / (da - db)
            out.append(a + t * (b - a))
    return np.asarray(out) if len(out) >= 3 else np.empty((0, 2))


def _clip_to_box(poly: np.ndarray, size: float) -> np.ndarray:
    for point, normal in (
        ((0.0, 0.0), (1.0, 0.0)),
        ((0.0, 0.0), (0.0, 1.0)),
        ((size, size), (-1.0, 0.0)),
        ((size, size), (0.0, -1.0)),
    ):
        if len(poly) == 0:
            return poly
        poly = _clip_halfplane(poly, np.asarray(point), np.asarray(normal))
    return poly


def _ccw(poly: np.ndarray) -> np.ndarray:
    area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    return poly if area2 >= 0 else poly[::-1]


def _clean_polygon(poly: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Drop consecutive (near-)duplicate vertices introduced by clipping."""
    if len(poly) == 0:
        return poly
    keep = [poly[0]]
    for v in poly[1:]:
        if np.hypot(*(v - keep[-1])) > tol:
            keep.append(v)
    if len(keep) > 1 and np.hypot(*(keep[0] - keep[-1])) <= tol:
        keep.pop()
    out = np.asarray(keep)
    return out if len(out) >= 3 else np.empty((0, 2))


def _erode_convex(poly: np.ndarray, r: float) -> np.ndarray:
    """Inward offset of a convex polygon by r (half-plane intersection)."""
    if r <= 0:
        return poly
    poly = _ccw(poly)
    result = poly
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        edge = b - a
        norm = np.hypot(edge[0], edge[1])
        if norm == 0:
            continue
        inward = np.array([-edge[1], edge[0]]) / norm  # interior is left of a CCW edge
        if len(result) == 0:
            break
        result = _clip_halfplane(result, a + r * inward, inward)
    return result


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _voronoi_cells(points: np.ndarray, size: float) -> list[np.ndarray]:
    """Bounded Voronoi cells clipped to [0, size]^2.

    Mirror points across the four box edges so every original point's cell
    is bounded by the box itself; the cells then tile the box exactly.
    """
    mirrored = [points]
    for axis, bound in ((0, 0.0), (0, size), (1, 0.0), (1, size)):
        m = points.copy()
        m[:, axis] = 2 * bound - m[:, axis]
        mirrored.append(m)
    vor = Voronoi(np.vstack(mirrored))
    cells = []
    for i in range(len(points)):
        region = vor.regions[vor.point_region[i]]
        verts = vor.vertices[np.asarray(region)]
        center = verts.mean(axis=0)
        order = np.argsort(np.arctan2(verts[:, 1] - center[1], verts[:, 0] - center[0]))
        cells.append(_clip_to_box(_ccw(verts[order]), size))
    return cells


# ---------------------------------------------------------------------------
# Layout and churn.


def _draw_layout(config: SceneConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All candidate cell polygons (eroded) and the per-year field index sets."""
    size = float(config.scene_size_px)
    rng = stream(config.seed, DOMAIN_LAYOUT, 0)
    intensity = 4.0 / (np.pi * config.mean_field_diameter_px**2)
    n_points = max(4, int(rng.poisson(intensity * size * size)))
    points = rng.uniform(0.0, size, (n_points, 2))
    cells = _voronoi_cells(points, size)
    eroded = [_clean_polygon(_erode_convex(c, config.field_gap_px)) for c in cells]
    areas = np.array([polygon_area(p) for p in eroded])
    usable = [i for i in range(len(eroded)) if areas[i] > 0]

    target = config.field_density * size * size
    marked: list[int] = []
    if target > 0:
        total = 0.0
        for i in rng.permutation(usable):
            if total >= target:
                break
            marked.append(int(i))
            total += areas[i]
    return eroded, _churn_years(config, usable, marked)


def _churn_years(config: SceneConfig, usable: list[int], base_marked: list[int]) -> list[np.ndarray]:
    """Field index sets per year; year k+1 swaps churn_fraction/2 in and out."""
    year_sets = [np.sort(np.asarray(base_marked, dtype=int))]
    current = set(base_marked)
    for yi in range(1, len(config.years)):
        rng = stream(config.seed, DOMAIN_LAYOUT, yi)
        n_swap = int(round(config.churn_fraction * len(current) / 2.0))
        pool = sorted(set(usable) - current)
        n_swap = min(n_swap, len(pool), len(current))
        if n_swap > 0:
            drop = rng.choice(sorted(current), size=n_swap, replace=False)
            add = rng.choice(pool, size=n_swap, replace=False)
            current = (current - set(int(d) for d in drop)) | set(int(a) for a in add)
        year_sets.append(np.sort(np.asarray(sorted(current), dtype=int)))
    return year_sets


# ---------------------------------------------------------------------------
# Imagery.


def _value_noise(rng: np.random.Generator, size: int, cell: int = 32) -> np.ndarray:
    """Low-frequency texture: coarse Gaussian grid, bilinear upsampled."""
    nodes = size // cell + 2
    coarse = rng.normal(0.0, 1.0, (nodes, nodes))
    coords = np.arange(size) / cell
    i0 = np.floor(coords).astype(int)
    frac = coords - i0
    rows = coarse[i0][:, i0]
    rows_r = coarse[i0 + 1][:, i0]
    cols = coarse[i0][:, i0 + 1]
    both = coarse[i0 + 1][:, i0 + 1]
    fy = frac[:, None]
    fx = frac[None, :]
    return (
        rows * (1 - fy) * (1 - fx)
        + rows_r * fy * (1 - fx)
        + cols * (1 - fy) * fx
        + both * fy * fx
    )


def _render_base(config: SceneConfig, cells: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Year-independent appearance: background texture and per-cell fill values."""
    size = config.scene_size_px
    rng = stream(config.seed, DOMAIN_BASE, 0)
    base = np.empty((config.band_count, size, size), dtype=np.float64)
    for b in range(config.band_count):
        texture = _value_noise(rng, size)
        texture = texture / max(np.abs(texture).max(), 1e-12) * config.background_texture_amp
        base[b] = config.background_reflectance[b] + texture
    jitter = rng.normal(0.0, config.field_jitter, (len(cells), config.band_count))
    fills = [np.asarray(config.field_reflectance) + jitter[i] for i in range(len(cells))]
    return base, fills


def _cell_pixel_masks(cells: list[np.ndarray], indices: np.ndarray, size: int) -> dict[int, np.ndarray]:
    out = {}
    for i in indices:
        mask = labeling.rasterize_fields([cells[int(i)]], size, size)
        out[int(i)] = mask.data == labeling.INTERIOR
    return out


def apply_year_shift(chip: Chip, shift: YearShift, rng: np.random.Generator | None = None) -> Chip:
    """Per-year acquisition transform.

    Optional smoothing pass, then per band b:
        v' = (v - mean_b) * band_std_scale[b] + mean_b + band_mean_offset[b] + N(0, noise_sigma^2)
    where mean_b is the band mean of the (smoothed) input chip.
    """
    if chip.band_count != len(shift.band_mean_offset):
        raise DimensionError(
            f"chip has {chip.band_count} bands, shift declares {len(shift.band_mean_offset)}"
        )
    data = chip.data.astype(np.float64, copy=True)
    if shift.acquisition_smoothing_px > 0:
        for b in range(data.shape[0]):
            data[b] = ndimage.gaussian_filter(
                data[b], sigma=shift.acquisition_smoothing_px, mode="reflect"
            )
    scale = np.asarray(shift.band_std_scale, dtype=np.float64)[:, None, None]
    offset = np.asarray(shift.band_mean_offset, dtype=np.float64)[:, None, None]
    if (scale != 1.0).any() or (offset != 0.0).any():  # keep the identity bit-exact
        means = data.mean(axis=(1, 2), keepdims=True)
        data = (data - means) * scale + means + offset
    if shift.noise_sigma > 0:
        if rng is None:
            raise ConfigError("apply_year_shift needs an RNG stream when noise_sigma > 0")
        data = data + rng.normal(0.0, shift.noise_sigma, data.shape)
    return chip.with_data(data, year=shift.year_tag)


def generate_scene(config: SceneConfig) -> Scene:
    """Deterministic scene synthesis; see module docstring for the model."""
    config.validate()
    size = config.scene_size_px
    cells, year_sets = _draw_layout(config)
    base, fills = _render_base(config, cells)

    all_indices = np.unique(np.concatenate([s for s in year_sets]) if any(len(s) for s in year_sets) else np.empty(0, int))
    pixel_masks = _cell_pixel_masks(cells, all_indices, size)

    imagery: dict[str, Chip] = {}
    polygons: dict[str, list[np.ndarray]] = {}
    for yi, shift in enumerate(config.years):
        img = base.copy()
        for i in year_sets[yi]:
            sel = pixel_masks[int(i)]
            for b in range(config.band_count):
                img[b][sel] = fills[int(i)][b]
        chip = Chip(data=img, tile_id="scene", year=shift.year_tag)
        chip = apply_year_shift(chip, shift, rng=stream(config.seed, DOMAIN_NOISE, yi))
        imagery[shift.year_tag] = chip
        polygons[shift.year_tag] = [cells[int(i)] for i in year_sets[yi]]
    return Scene(imagery=imagery, field_polygons=polygons, config=config)


def scene_labels(scene: Scene, year_tag: str) -> LabelMask:
    """3-class whole-scene mask for one year (rasterize + boundary buffer)."""
    size = scene.config.scene_size_px
    mask = labeling.rasterize_fields(scene.field_polygons[year_tag], size, size)
    mask = labeling.buffer_boundaries(mask, scene.config.boundary_thickness_px)
    mask.year = year_tag
    mask.tile_id = "scene"
    return mask


def export_chips(
    scene: Scene,
    chip_size: int,
    overlap: int,
    downsample_factor: int = 1,
    labels: dict[str, LabelMask] | None = None,
) -> list[tuple[Chip, LabelMask]]:
    """Cut a regular grid of overlapping training chips from every year.

    Each window is chip_size + 2*overlap on a side; the declared core is the
    central chip_size square and the surrounding ring is set to the ignore
    code in the label.  Cores per axis: floor((scene - 2*overlap)/chip_size).
    Precomputed whole-scene labels can be passed to avoid re-rasterizing.
    """
    size = scene.config.scene_size_px
    window = chip_size + 2 * overlap
    if chip_size <= 0 or overlap < 0:
        raise ConfigError(f"invalid chip geometry: chip_size={chip_size} overlap={overlap}")
    if window > size:
        raise ConfigError(
            f"chip window {window} (chip {chip_size} + 2*{overlap}) exceeds scene size {size}"
        )
    if window % downsample_factor != 0:
        raise ConfigError(
            f"chip window {window} not divisible by network downsampling factor {downsample_factor}"
        )
    n = (size - 2 * overlap) // chip_size
    out: list[tuple[Chip, LabelMask]] = []
    for shift in scene.config.years:
        year = shift.year_tag
        label = labels[year] if labels is not None else scene_labels(scene, year)
        img = scene.imagery[year].data
        for r in range(n):
            for c in range(n):
                r0, c0 = r * chip_size, c * chip_size
                tile_id = f"r{r}c{c}"
                window_img = img[:, r0 : r0 + window, c0 : c0 + window].copy()
                window_lab = label.data[r0 : r0 + window, c0 : c0 + window].copy()
                if overlap > 0:
                    core = window_lab[overlap:-overlap, overlap:-overlap].copy()
                    window_lab[:, :] = IGNORE
                    window_lab[overlap:-overlap, overlap:-overlap] = core
                out.append(
                    (
                        Chip(window_img, tile_id=tile_id, year=year, offset=(r0, c0)),
                        LabelMask(window_lab, tile_id=tile_id, year=year, offset=(r0, c0)),
                    )
                )
    return out
