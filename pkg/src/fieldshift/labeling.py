"""Field polygons to 3-class training masks.

Pipeline: scanline rasterization of polygon interiors (even-odd rule at
pixel centers), then a boundary band of configurable Chebyshev radius
around every interior/background transition, then ignore padding for the
margins that are masked out of loss and metrics.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DimensionError, GeometryError
from .raster import BACKGROUND, BOUNDARY, IGNORE, INTERIOR, LabelMask

# PNG palette for mask quicklooks.
LABEL_PALETTE = {
    BACKGROUND: (255, 255, 255),  # white
    INTERIOR: (0, 128, 0),        # green
    BOUNDARY: (0, 0, 0),          # black
    IGNORE: (128, 128, 128),      # gray
}


def _segments(poly: np.ndarray) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    n = len(poly)
    for i in range(n):
        yield poly[i], poly[(i + 1) % n]


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    if d1 == 0 and on_seg(q1, q2, p1):
        return True
    if d2 == 0 and on_seg(q1, q2, p2):
        return True
    if d3 == 0 and on_seg(p1, p2, q1):
        return True
    if d4 == 0 and on_seg(p1, p2, q2):
        return True
    return False


def is_simple_polygon(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect or touch."""
    poly = np.asarray(poly, dtype=float)
    n = len(poly)
    if n < 3:
        return False
    edges = list(_segments(poly))
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j - i) % n == 1 or (i - j) % n == 1:
                continue  # adjacent edges share a vertex by construction
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def _scanline_fill(poly: np.ndarray, grid: np.ndarray) -> None:
    """Even-odd fill of one polygon into a boolean grid at pixel centers."""
    height, width = grid.shape
    ys = poly[:, 1]
    row_lo = max(0, int(np.floor(ys.min() - 0.5)))
    row_hi = min(height - 1, int(np.ceil(ys.max())))
    for row in range(row_lo, row_hi + 1):
        yc = row + 0.5
        crossings = []
        for (x1, y1), (x2, y2) in _segments(poly):
            if (y1 <= yc) != (y2 <= yc):  # half-open rule handles shared vertices
                t = (yc - y1) / (y2 - y1)
                crossings.append(x1 + t * (x2 - x1))
        crossings.sort()
        for a, b in zip(crossings[0::2], crossings[1::2]):
            lo = max(0, int(np.ceil(a - 0.5)))
            hi = min(width, int(np.ceil(b - 0.5)))
            if hi > lo:
                grid[row, lo:hi] = True


def rasterize_fields(
    polygons: Sequence[np.ndarray], width: int, height: int
) -> LabelMask:
    """Rasterize polygon interiors: pixel is interior iff its center is inside.

    Overlapping polygons union.  Raises GeometryError naming the offending
    polygon index when one is self-intersecting or out of bounds.
    """
    grid = np.zeros((height, width), dtype=bool)
    for idx, poly in enumerate(polygons):
        poly = np.asarray(poly, dtype=float)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise GeometryError(f"polygon {idx} is not a list of >=3 (x, y) vertices")
        if not is_simple_polygon(poly):
            raise GeometryError(f"polygon {idx} is self-intersecting")
        if (
            poly[:, 0].min() < 0
            or poly[:, 1].min() < 0
            or poly[:, 0].max() > width
            or poly[:, 1].max() > height
        ):
            raise GeometryError(f"polygon {idx} extends outside the {width}x{height} raster")
        _scanline_fill(poly, grid)
    data = np.where(grid, INTERIOR, BACKGROUND).astype(np.uint8)
    return LabelMask(data=data)


def buffer_boundaries(mask: LabelMask, thickness_px: int = 2) -> LabelMask:
    """Mark the boundary band around every interior/background transition.

    A pixel becomes boundary when the nearest pixel of the opposite class is
    within Chebyshev distance ``thickness_px``, so the band extends the full
    thickness on both sides of the transition (a 10x10 interior block with
    thickness 2 keeps a 6x6 interior core).
    """
    if thickness_px <= 0:
        raise ConfigError(f"boundary thickness must be positive, got {thickness_px}")
    data = mask.data
    if not np.isin(data, (BACKGROUND, INTERIOR)).all():
        raise DataError("buffer_boundaries expects a mask with only background/interior")
    interior = data == INTERIOR
    if not interior.any() or interior.all():
        return LabelMask(data.copy(), mask.tile_id, mask.year, mask.offset)
    size = 2 * thickness_px + 1
    near_interior = ndimage.maximum_filter(interior, size=size, mode="constant", cval=False)
    near_background = ndimage.maximum_filter(~interior, size=size, mode="constant", cval=False)
    band = (interior & near_background) | (~interior & near_interior)
    out = np.where(band, BOUNDARY, data).astype(np.uint8)
    return LabelMask(out, mask.tile_id, mask.year, mask.offset)


def pad_with_ignore(mask: LabelMask, target: int = 224) -> LabelMask:
    """Center the mask in a target-square raster, padding with the ignore code.

    Odd padding puts the extra pixel on the bottom/right.
    """
    h, w = mask.data.shape
    if target < h or target < w:
        raise DimensionError(f"target {target} smaller than mask {h}x{w}")
    top = (target - h) // 2
    left = (target - w) // 2
    out = np.full((target, target), IGNORE, dtype=np.uint8)
    out[top : top + h, left : left + w] = mask.data
    return LabelMask(out, mask.tile_id, mask.year, mask.offset)


def mask_to_png(mask: LabelMask, path: str) -> None:
    """Quicklook with the fixed class palette."""
    from PIL import Image

    palette = np.zeros((256, 3), dtype=np.uint8)
    for code, rgb in LABEL_PALETTE.items():
        palette[code] = rgb
    img = Image.fromarray(mask.data, mode="P")
    img.putpalette(palette.flatten().tolist())
    img.save(path)
