"""Confusion counts, derived metrics, spatial confusion rasters, CSV reports.

Metrics binarize on the field-interior class; reference boundary pixels map
to the negative class by default (a strict mode treats them as ignored).
Aggregates pool counts first (micro averaging); macro averages are emitted
alongside for comparison.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError
from .raster import BOUNDARY, IGNORE, INTERIOR, LabelMask

# Spatial confusion category codes and PNG palette.
CAT_IGNORE = 0
CAT_TP = 1
CAT_FP = 2
CAT_FN = 3
CAT_TN = 4
CONFUSION_PALETTE = {
    CAT_TP: (0, 128, 0),        # green
    CAT_FP: (255, 0, 0),        # red
    CAT_FN: (0, 0, 255),        # blue
    CAT_TN: (211, 211, 211),    # light gray
    CAT_IGNORE: (255, 255, 255),  # white
}


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    ignore_count: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
            self.ignore_count + other.ignore_count,
        )

    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn + self.ignore_count


def _binarize(pred: LabelMask, ref: LabelMask, boundary_as: str):
    if pred.data.shape != ref.data.shape:
        raise DimensionError(
            f"prediction {pred.data.shape} and reference {ref.data.shape} differ"
        )
    if boundary_as not in ("negative", "ignore"):
        raise DataError(f"boundary_as must be 'negative' or 'ignore', got '{boundary_as}'")
    valid = ref.data != IGNORE
    if boundary_as == "ignore":
        valid &= ref.data != BOUNDARY
    pos_ref = valid & (ref.data == INTERIOR)
    pos_pred = pred.data == INTERIOR
    return valid, pos_ref, pos_pred


def confusion_counts(
    pred: LabelMask, ref: LabelMask, boundary_as: str = "negative"
) -> ConfusionCounts:
    """Pixel counts for the interior-vs-rest binarization over valid pixels."""
    valid, pos_ref, pos_pred = _binarize(pred, ref, boundary_as)
    return ConfusionCounts(
        tp=int((valid & pos_pred & pos_ref).sum()),
        fp=int((valid & pos_pred & ~pos_ref).sum()),
        fn=int((valid & ~pos_pred & pos_ref).sum()),
        tn=int((valid & ~pos_pred & ~pos_ref).sum()),
        ignore_count=int((~valid).sum()),
    )


@dataclass
class MetricsRow:
    run_id: str = ""
    norm_scheme: str = ""
    year: str = ""
    tile_id: str = ""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    iou: float = 0.0
    degenerate: bool = False


def metrics(
    counts: ConfusionCounts,
    run_id: str = "",
    norm_scheme: str = "",
    year: str = "",
    tile_id: str = "",
) -> MetricsRow:
    """Precision/recall/F1/IoU with explicit 0/0 conventions.

    Nothing claimed and nothing to find scores 1.0 (flagged degenerate);
    a denominator of zero against existing error pixels scores 0.0.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    degenerate = False
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
        degenerate = True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 1.0 if fp == 0 else 0.0
        degenerate = True
    else:
        recall = tp / (tp + fn)
    if tp + fp + fn == 0:
        f1 = 1.0
        iou = 1.0
        degenerate = True
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    return MetricsRow(
        run_id=run_id,
        norm_scheme=norm_scheme,
        year=year,
        tile_id=tile_id,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=counts.tn,
        precision=precision,
        recall=recall,
        f1=f1,
        iou=iou,
        degenerate=degenerate,
    )


def counts_of(row: MetricsRow) -> ConfusionCounts:
    return ConfusionCounts(tp=row.tp, fp=row.fp, fn=row.fn, tn=row.tn)


def spatial_confusion(
    pred: LabelMask, ref: LabelMask, boundary_as: str = "negative"
) -> np.ndarray:
    """Per-pixel TP/FP/FN/TN/IGNORE categories as a uint8 raster."""
    valid, pos_ref, pos_pred = _binarize(pred, ref, boundary_as)
    out = np.full(ref.data.shape, CAT_IGNORE, dtype=np.uint8)
    out[valid & pos_pred & pos_ref] = CAT_TP
    out[valid & pos_pred & ~pos_ref] = CAT_FP
    out[valid & ~pos_pred & pos_ref] = CAT_FN
    out[valid & ~pos_pred & ~pos_ref] = CAT_TN
    return out


def confusion_to_png(categories: np.ndarray, path: str) -> None:
    from PIL import Image

    palette = np.zeros((256, 3), dtype=np.uint8)
    for code, rgb in CONFUSION_PALETTE.items():
        palette[code] = rgb
    img = Image.fromarray(categories.astype(np.uint8), mode="P")
    img.putpalette(palette.flatten().tolist())
    img.save(path)


# ---------------------------------------------------------------------------
# Report tables.


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}%"


def _flag_best(cells: list[str], values: list[float]) -> list[str]:
    if not values:
        return cells
    best = max(values)
    return [c + ("*" if v == best else "") for c, v in zip(cells, values)]


def rows_to_csv(rows: list[MetricsRow]) -> str:
    """Machine-readable per-row table with the fixed schema."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "run_id", "norm_scheme", "year", "tile_id",
            "tp", "fp", "fn", "tn",
            "precision", "recall", "f1", "iou", "degenerate_flag",
        ]
    )
    for r in rows:
        writer.writerow(
            [
                r.run_id, r.norm_scheme, r.year, r.tile_id,
                r.tp, r.fp, r.fn, r.tn,
                f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}", f"{r.iou:.6f}",
                int(r.degenerate),
            ]
        )
    return buf.getvalue()


def _pool(rows: list[MetricsRow]) -> MetricsRow:
    total = ConfusionCounts()
    for r in rows:
        total = total + counts_of(r)
    return metrics(total)


def report(rows: list[MetricsRow], group_by: str = "run") -> str:
    """Grouped CSV table; best value per metric column is starred.

    group_by "run": one line per run with micro-pooled metrics plus macro
    averages.  group_by "year"/"tile": per run, one IoU row and one F1 row
    with one column per year/tile plus a pooled "all" column.
    """
    if not rows:
        raise DataError("cannot build a report from zero rows")
    if group_by not in ("run", "year", "tile"):
        raise DataError(f"unknown grouping '{group_by}'")
    runs = sorted({r.run_id for r in rows})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")

    if group_by == "run":
        writer.writerow(
            ["run_id", "norm_scheme", "precision", "recall", "f1", "iou",
             "macro_f1", "macro_iou"]
        )
        table = []
        for run in runs:
            sub = [r for r in rows if r.run_id == run]
            pooled = _pool(sub)
            macro_f1 = float(np.mean([r.f1 for r in sub]))
            macro_iou = float(np.mean([r.iou for r in sub]))
            scheme = sub[0].norm_scheme
            table.append((run, scheme, pooled, macro_f1, macro_iou))
        columns = {
            "precision": [t[2].precision for t in table],
            "recall": [t[2].recall for t in table],
            "f1": [t[2].f1 for t in table],
            "iou": [t[2].iou for t in table],
        }
        flagged = {
            name: _flag_best([_pct(v) for v in vals], vals) for name, vals in columns.items()
        }
        for i, (run, scheme, pooled, macro_f1, macro_iou) in enumerate(table):
            writer.writerow(
                [run, scheme, flagged["precision"][i], flagged["recall"][i],
                 flagged["f1"][i], flagged["iou"][i], _pct(macro_f1), _pct(macro_iou)]
            )
        return buf.getvalue()

    key = (lambda r: r.year) if group_by == "year" else (lambda r: r.tile_id)
    groups = sorted({key(r) for r in rows})
    writer.writerow(["run_id", "metric", *groups, "all"])
    lines = []
    for run in runs:
        sub = [r for r in rows if r.run_id == run]
        per_group = {g: _pool([r for r in sub if key(r) == g]) for g in groups}
        pooled = _pool(sub)
        lines.append((run, "iou", [per_group[g].iou for g in groups], pooled.iou))
        lines.append((run, "f1", [per_group[g].f1 for g in groups], pooled.f1))
    # format all rows, then star the best per column within each metric family
    formatted = {}
    for metric_name in ("iou", "f1"):
        family = [ln for ln in lines if ln[1] == metric_name]
        matrix = [[*(ln[2]), ln[3]] for ln in family]
        cells = [[_pct(v) for v in row] for row in matrix]
        for col in range(len(groups) + 1):
            vals = [row[col] for row in matrix]
            best = max(vals)
            for rix, v in enumerate(vals):
                if v == best:
                    cells[rix][col] += "*"
        for (run, _, _, _), row_cells in zip(family, cells):
            formatted[(run, metric_name)] = row_cells
    for run in runs:
        for metric_name in ("iou", "f1"):
            writer.writerow([run, metric_name, *formatted[(run, metric_name)]])
    return buf.getvalue()
