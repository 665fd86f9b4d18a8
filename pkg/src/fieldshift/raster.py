"""Core raster types shared across the pipeline: imagery chips and label masks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DimensionError

# Label class codes.
BACKGROUND = 0
INTERIOR = 1
BOUNDARY = 2
IGNORE = 255

CLASS_COUNT = 3


@dataclass
class Chip:
    """A bands-first (C, H, W) floating point raster with provenance."""

    data: np.ndarray
    tile_id: str = ""
    year: str = ""
    offset: tuple[int, int] = (0, 0)  # (row, col) of this window in its scene
    norm: str | None = None           # normalization scheme code once applied
    degenerate: bool = False          # normalization hit degenerate statistics

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"chip data must be (bands, H, W), got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            raise DataError(f"chip data must be floating point, got {self.data.dtype}")

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray, **changes) -> "Chip":
        """Copy provenance onto a new data array."""
        return replace(self, data=data, **changes)


@dataclass
class LabelMask:
    """An (H, W) class raster over {background, interior, boundary} plus ignore."""

    data: np.ndarray
    tile_id: str = ""
    year: str = ""
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DimensionError(f"mask data must be (H, W), got shape {self.data.shape}")
        self.data = self.data.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def valid(self) -> np.ndarray:
        """Boolean view: True where the pixel participates in loss/metrics."""
        return self.data != IGNORE

    def validate_codes(self) -> None:
        bad = ~np.isin(self.data, (BACKGROUND, INTERIOR, BOUNDARY, IGNORE))
        if bad.any():
            raise DataError(f"mask contains {int(bad.sum())} pixels outside the class alphabet")

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.data, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}
