"""
IoU / mIoU evaluation in 3D and BEV space.

Occupancy IoU compares the binary occupied (label > 0) masks. Semantic
mIoU averages per-class ``TP / (TP + FP + FN)`` over the evaluated classes;
a class that appears in neither prediction nor ground truth is flagged as
absent and left out of the mean.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from src.occupancy.bev import project_label
from src.occupancy.errors import (
    DimMismatch,
    EmptyClassSet,
    InvalidParameter,
    LengthMismatch,
)
from src.occupancy.grid import FREE_LABEL, OccGrid, OccSequence, _check_labels

logger = logging.getLogger(__name__)


class Space(str, Enum):
    VOXEL = "3d"
    BEV = "bev"


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Entry ``(g, p)`` counts voxels of ground truth ``g`` predicted ``p``."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DimMismatch("confusion matrix must be square")
        if np.any(counts < 0):
            raise InvalidParameter("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts)

    def gt_histogram(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def pred_histogram(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def unions(self) -> np.ndarray:
        """``TP + FP + FN`` per class."""
        return (
            self.gt_histogram()
            + self.pred_histogram()
            - self.true_positives()
        )

    def per_class_iou(self) -> np.ndarray:
        """Per-class IoU; classes with an empty union report 0."""
        unions = self.unions()
        tp = self.true_positives()
        out = np.zeros(self.num_classes, dtype=np.float64)
        present = unions > 0
        out[present] = tp[present] / unions[present]
        return out

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise DimMismatch("confusion matrices differ in class count")
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    __hash__ = None


@dataclass
class MetricReport:
    space: Space
    iou_occupancy: float
    miou: float
    per_class_iou: List[float]
    evaluated_classes: List[int]
    absent_classes: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "space": self.space.value,
            "iou": self.iou_occupancy,
            "miou": self.miou,
            "per_class_iou": list(self.per_class_iou),
            "evaluated_classes": list(self.evaluated_classes),
            "absent_classes": list(self.absent_classes),
        }


def _tally(pred: np.ndarray, gt: np.ndarray, c: int) -> ConfusionMatrix:
    flat = c * gt.reshape(-1).astype(np.int64) + pred.reshape(-1)
    counts = np.bincount(flat, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(counts)


def _check_pair(pred: OccGrid, gt: OccGrid) -> None:
    if pred.dims != gt.dims:
        raise DimMismatch(
            f"prediction dims {pred.dims} differ from ground truth {gt.dims}"
        )


def _resolve_class_set(
    class_set: Optional[Iterable[int]], c: int
) -> List[int]:
    if class_set is None:
        return [i for i in range(c) if i != FREE_LABEL]
    ids = sorted(set(int(i) for i in class_set))
    if not ids:
        raise EmptyClassSet("class set must name at least one class")
    for i in ids:
        if not 0 <= i < c:
            raise InvalidParameter(f"class {i} not in [0, {c})")
    return ids


def confusion(
    pred: OccGrid, gt: OccGrid, num_classes: Optional[int] = None
) -> ConfusionMatrix:
    """Exact per-voxel tally of ``(gt, pred)`` label pairs."""
    _check_pair(pred, gt)
    c = num_classes or max(pred.num_classes, gt.num_classes)
    _check_labels(pred.labels, c)
    _check_labels(gt.labels, c)
    return _tally(pred.labels, gt.labels, c)


def _iou_masks(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def iou_occupancy(pred: OccGrid, gt: OccGrid) -> float:
    """Occupied-vs-free IoU; 1.0 when both grids are empty."""
    _check_pair(pred, gt)
    return _iou_masks(pred.occupied(), gt.occupied())


def _report(
    space: Space,
    iou: float,
    cm: ConfusionMatrix,
    class_set: Optional[Iterable[int]],
) -> MetricReport:
    ids = _resolve_class_set(class_set, cm.num_classes)
    per_class = cm.per_class_iou()
    unions = cm.unions()
    evaluated = [i for i in ids if unions[i] > 0]
    absent = [i for i in ids if unions[i] == 0]
    value = float(np.mean(per_class[evaluated])) if evaluated else 1.0
    return MetricReport(
        space=space,
        iou_occupancy=float(iou),
        miou=value,
        per_class_iou=[float(v) for v in per_class],
        evaluated_classes=evaluated,
        absent_classes=absent,
    )


def miou(
    pred: OccGrid,
    gt: OccGrid,
    class_set: Optional[Iterable[int]] = None,
    num_classes: Optional[int] = None,
) -> MetricReport:
    """Voxel-space report; ``class_set`` defaults to every non-free class.

    When no class of ``class_set`` appears in either grid the mIoU is 1.0.
    """
    cm = confusion(pred, gt, num_classes)
    return _report(Space.VOXEL, iou_occupancy(pred, gt), cm, class_set)


def bev_metrics(
    pred: OccGrid,
    gt: OccGrid,
    class_set: Optional[Iterable[int]] = None,
    num_classes: Optional[int] = None,
) -> MetricReport:
    """Same report on the top-label BEV projections of both grids."""
    _check_pair(pred, gt)
    c = num_classes or max(pred.num_classes, gt.num_classes)
    _check_labels(pred.labels, c)
    _check_labels(gt.labels, c)
    p = project_label(pred).labels
    g = project_label(gt).labels
    iou = _iou_masks(p != FREE_LABEL, g != FREE_LABEL)
    return _report(Space.BEV, iou, _tally(p, g, c), class_set)


@dataclass
class HorizonRow:
    horizon: int
    report: MetricReport


@dataclass
class HorizonTable:
    """3D and BEV reports for each forecast horizon (1-based)."""

    num_classes: int
    rows: List[HorizonRow] = field(default_factory=list)
    method: str = "prediction"

    def reports(self, space: Space | str) -> List[MetricReport]:
        space = Space(space)
        return [r.report for r in self.rows if r.report.space is space]

    def iou_series(self, space: Space | str = Space.VOXEL) -> List[float]:
        return [r.iou_occupancy for r in self.reports(space)]

    def miou_series(self, space: Space | str = Space.VOXEL) -> List[float]:
        return [r.miou for r in self.reports(space)]

    def header(self) -> List[str]:
        return ["horizon", "space", "iou", "miou"] + [
            f"class_{i}" for i in range(self.num_classes)
        ]

    def csv_rows(self) -> List[List[str]]:
        out = []
        for row in self.rows:
            rep = row.report
            evaluated = set(rep.evaluated_classes)
            cells = [
                _fmt(rep.per_class_iou[i]) if i in evaluated else ""
                for i in range(self.num_classes)
            ]
            out.append(
                [
                    str(row.horizon),
                    rep.space.value,
                    _fmt(rep.iou_occupancy),
                    _fmt(rep.miou),
                ]
                + cells
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.csv_rows())
        return buf.getvalue()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "num_classes": self.num_classes,
            "rows": [
                {"horizon": r.horizon, **r.report.to_dict()}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def evaluate_horizons(
    pred: OccSequence,
    gt: OccSequence,
    class_set: Optional[Iterable[int]] = None,
    num_classes: Optional[int] = None,
    method: str = "prediction",
) -> HorizonTable:
    if len(pred) != len(gt):
        raise LengthMismatch(
            f"prediction has {len(pred)} frames, ground truth {len(gt)}",
            {"pred": len(pred), "gt": len(gt)},
        )
    if pred.dims != gt.dims:
        raise DimMismatch(f"sequence dims {pred.dims} vs {gt.dims}")
    c = num_classes or max(pred[0].num_classes, gt[0].num_classes)
    class_ids = None if class_set is None else list(class_set)
    table = HorizonTable(num_classes=c, method=method)
    for k, (p, g) in enumerate(zip(pred, gt), start=1):
        table.rows.append(HorizonRow(k, miou(p, g, class_ids, c)))
        table.rows.append(HorizonRow(k, bev_metrics(p, g, class_ids, c)))
    logger.info(
        "%s: evaluated %d horizons, 3d IoU %s",
        method,
        len(pred),
        ", ".join(_fmt(v) for v in table.iou_series()),
    )
    return table


def comparison_csv(tables: Sequence[HorizonTable]) -> str:
    """Stack several methods' tables with a leading ``method`` column."""
    if not tables:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method"] + tables[0].header())
    for table in tables:
        for cells in table.csv_rows():
            writer.writerow([table.method] + cells)
    return buf.getvalue()
