"""Input normalization schemes and dataset statistics.

Eight schemes from the 2x2x2 product {min-max, z-value} x {local, global} x
{all-bands, per-band}, named by code: mm-lab, mm-lpb, mm-gab, mm-gpb,
zv-lab, zv-lpb, zv-gab, zv-gpb.  Global statistics are computed once over
the training split and frozen; local statistics come from each chip at
apply time.  Every scheme is an affine map with positive scale, so pairwise
inter-band Pearson correlations are preserved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateStatsWarning, DimensionError, StatsError
from .raster import Chip

_METHODS = {"mm": "min-max", "zv": "z-value"}
_LOCALITIES = {"l": "local", "g": "global"}
_SCOPES = {"ab": "all", "pb": "per"}


@dataclass(frozen=True)
class NormScheme:
    method: str = "mm"        # "mm" | "zv"
    locality: str = "local"   # "local" | "global"
    band_scope: str = "all"   # "all" (pooled) | "per" (per band)
    clip_fractions: tuple[float, float] | None = None  # optional min-max percentile clip

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ConfigError(f"unknown normalization method '{self.method}'")
        if self.locality not in _LOCALITIES.values():
            raise ConfigError(f"unknown locality '{self.locality}'")
        if self.band_scope not in _SCOPES.values():
            raise ConfigError(f"unknown band scope '{self.band_scope}'")
        if self.clip_fractions is not None:
            lo, hi = self.clip_fractions
            if not (0.0 <= lo < hi <= 1.0):
                raise ConfigError(f"clip_fractions must satisfy 0 <= lo < hi <= 1, got {self.clip_fractions}")
            if self.method != "mm":
                raise ConfigError("percentile clipping applies to min-max schemes only")

    @property
    def code(self) -> str:
        loc = "l" if self.locality == "local" else "g"
        scope = "ab" if self.band_scope == "all" else "pb"
        return f"{self.method}-{loc}{scope}"

    @classmethod
    def from_code(cls, code: str) -> "NormScheme":
        try:
            method, rest = code.split("-")
            locality = _LOCALITIES[rest[0]]
            scope = _SCOPES[rest[1:]]
        except (ValueError, KeyError, IndexError):
            raise ConfigError(f"unknown normalization code '{code}'") from None
        if method not in _METHODS:
            raise ConfigError(f"unknown normalization code '{code}'")
        return cls(method=method, locality=locality, band_scope=scope)


ALL_SCHEME_CODES = ("mm-lab", "mm-lpb", "mm-gab", "mm-gpb", "zv-lab", "zv-lpb", "zv-gab", "zv-gpb")


@dataclass
class NormStats:
    """Aggregated min/max/mean/std, either pooled scalars or per-band vectors."""

    minimum: np.ndarray
    maximum: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    sample_count: int
    band_scope: str

    def to_json(self) -> dict:
        return {
            "minimum": np.asarray(self.minimum).tolist(),
            "maximum": np.asarray(self.maximum).tolist(),
            "mean": np.asarray(self.mean).tolist(),
            "std": np.asarray(self.std).tolist(),
            "sample_count": int(self.sample_count),
            "band_scope": self.band_scope,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "NormStats":
        return cls(
            minimum=np.asarray(blob["minimum"], dtype=np.float64),
            maximum=np.asarray(blob["maximum"], dtype=np.float64),
            mean=np.asarray(blob["mean"], dtype=np.float64),
            std=np.asarray(blob["std"], dtype=np.float64),
            sample_count=int(blob["sample_count"]),
            band_scope=blob["band_scope"],
        )


class _Accumulator:
    """Streaming mean/variance/min/max with exact associative merging.

    Chan et al. pairwise update: each chunk contributes its own two-pass
    moments which are merged with the running aggregate, so partial
    accumulators over a partition of the data combine to the same result.
    """

    def __init__(self, width: int):
        self.n = 0
        self.mean = np.zeros(width)
        self.m2 = np.zeros(width)
        self.minimum = np.full(width, np.inf)
        self.maximum = np.full(width, -np.inf)

    def add_chunk(self, values: np.ndarray) -> None:
        # values: (width, n_pixels)
        n = values.shape[1]
        if n == 0:
            return
        chunk_mean = values.mean(axis=1)
        chunk_m2 = ((values - chunk_mean[:, None]) ** 2).sum(axis=1)
        self.merge_raw(n, chunk_mean, chunk_m2, values.min(axis=1), values.max(axis=1))

    def merge_raw(self, n, mean, m2, minimum, maximum) -> None:
        if self.n == 0:
            self.n, self.mean, self.m2 = n, mean, m2
            self.minimum, self.maximum = minimum, maximum
            return
        total = self.n + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta**2 * (self.n * n / total)
        self.n = total
        self.minimum = np.minimum(self.minimum, minimum)
        self.maximum = np.maximum(self.maximum, maximum)

    def merge(self, other: "_Accumulator") -> None:
        if other.n:
            self.merge_raw(other.n, other.mean, other.m2, other.minimum, other.maximum)

    def finish(self, band_scope: str) -> NormStats:
        if self.n == 0:
            raise StatsError("cannot compute statistics over an empty dataset")
        std = np.sqrt(self.m2 / self.n)
        return NormStats(
            minimum=self.minimum,
            maximum=self.maximum,
            mean=self.mean,
            std=std,
            sample_count=int(self.n),
            band_scope=band_scope,
        )


def compute_stats(dataset: Iterable[Chip], scheme: NormScheme) -> NormStats:
    """Single-pass statistics at the scheme's band scope.

    Percentile-clipped min-max replaces min/max with the requested quantiles,
    which requires materializing the values (fine at desk scale).
    """
    chips = list(dataset) if scheme.clip_fractions is not None else dataset
    acc: _Accumulator | None = None
    band_count = None
    source = chips if scheme.clip_fractions is not None else dataset
    for chip in source:
        if band_count is None:
            band_count = chip.band_count
            acc = _Accumulator(band_count if scheme.band_scope == "per" else 1)
        elif chip.band_count != band_count:
            raise DimensionError("all chips in a dataset must share the band count")
        values = chip.data.reshape(chip.band_count, -1).astype(np.float64)
        if scheme.band_scope == "all":
            values = values.reshape(1, -1)
        acc.add_chunk(values)
    if acc is None:
        raise StatsError("cannot compute statistics over an empty dataset")
    stats = acc.finish(scheme.band_scope)
    if scheme.clip_fractions is not None:
        lo, hi = scheme.clip_fractions
        stacked = np.concatenate(
            [c.data.reshape(c.band_count, -1).astype(np.float64) for c in chips], axis=1
        )
        if scheme.band_scope == "all":
            stacked = stacked.reshape(1, -1)
        stats.minimum = np.quantile(stacked, lo, axis=1)
        stats.maximum = np.quantile(stacked, hi, axis=1)
    return stats


def _broadcast(values: np.ndarray, band_scope: str, band_count: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if band_scope == "all":
        return np.full((band_count, 1, 1), arr[0])
    if arr.size != band_count:
        raise DimensionError(f"stats cover {arr.size} bands but chip has {band_count}")
    return arr[:, None, None]


def normalize_chip(chip: Chip, scheme: NormScheme, stats: NormStats | None = None) -> Chip:
    """Apply a scheme; degenerate statistics (flat input) map to all-zeros.

    Global schemes require precomputed stats; local schemes compute them
    from the chip itself at the declared band scope.
    """
    if scheme.locality == "global":
        if stats is None:
            raise ConfigError(f"scheme {scheme.code} requires precomputed global statistics")
        if stats.band_scope != scheme.band_scope:
            raise ConfigError(
                f"stats band scope '{stats.band_scope}' does not match scheme '{scheme.code}'"
            )
    else:
        stats = compute_stats([chip], scheme)

    data = chip.data.astype(np.float64)
    degenerate = False
    if scheme.method == "mm":
        lo = _broadcast(stats.minimum, scheme.band_scope, chip.band_count)
        hi = _broadcast(stats.maximum, scheme.band_scope, chip.band_count)
        span = hi - lo
        flat = span <= 0
        safe = np.where(flat, 1.0, span)
        out = (data - lo) / safe
        if flat.any():
            degenerate = True
            out = np.where(np.broadcast_to(flat, out.shape), 0.0, out)
    else:
        mean = _broadcast(stats.mean, scheme.band_scope, chip.band_count)
        std = _broadcast(stats.std, scheme.band_scope, chip.band_count)
        flat = std <= 0
        safe = np.where(flat, 1.0, std)
        out = (data - mean) / safe
        if flat.any():
            degenerate = True
            out = np.where(np.broadcast_to(flat, out.shape), 0.0, out)
    if degenerate:
        warnings.warn(f"degenerate statistics under {scheme.code}; flat scope mapped to 0", DegenerateStatsWarning)
    return chip.with_data(out.astype(chip.data.dtype, copy=False), norm=scheme.code, degenerate=degenerate)


def _band_cdf(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        edges = np.array([lo, lo])
        return edges, np.array([0.0, 1.0])
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    cdf = np.concatenate([[0.0], np.cumsum(counts) / values.size])
    return edges, cdf


def histogram_match(chip: Chip, reference: Chip | np.ndarray, bins: int = 1024) -> Chip:
    """Per-band monotone CDF matching against a reference image.

    Empirical CDFs on ``bins`` equal-width bins with linear interpolation
    between bin edges; a constant reference band maps the whole source band
    to that constant.
    """
    ref = reference.data if isinstance(reference, Chip) else np.asarray(reference)
    if ref.ndim != 3 or ref.shape[0] != chip.band_count:
        raise DimensionError(
            f"reference must be (bands, H, W) with {chip.band_count} bands, got {ref.shape}"
        )
    out = np.empty_like(chip.data, dtype=np.float64)
    for b in range(chip.band_count):
        src = chip.data[b].astype(np.float64)
        rv = ref[b].reshape(-1).astype(np.float64)
        if rv.max() <= rv.min():
            out[b] = rv.min()
            continue
        src_edges, src_cdf = _band_cdf(src.reshape(-1), bins)
        ref_edges, ref_cdf = _band_cdf(rv, bins)
        if src_edges[-1] <= src_edges[0]:
            # constant source band: place it at the reference quantile 0.5
            out[b] = np.interp(0.5, ref_cdf, ref_edges)
            continue
        quantiles = np.interp(src, src_edges, src_cdf)
        out[b] = np.interp(quantiles, ref_cdf, ref_edges)
    return chip.with_data(out.astype(chip.data.dtype, copy=False))
