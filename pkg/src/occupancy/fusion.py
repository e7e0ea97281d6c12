"""
Quality fusion of two coarse predictions.

Pipeline: one-hot both label grids, blend them with a gate weight, scale
each class channel by a frequency-rank weight taken from the second
prediction, refine, then take the per-voxel argmax. The softmax
cross-entropy and Lovasz-softmax losses are provided as evaluation
functions on probability feature grids.
"""

from __future__ import annotations

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from src.occupancy.errors import (
    BadMagic,
    DimMismatch,
    InvalidDims,
    InvalidParameter,
    IoFailure,
    NotProbability,
    TrailingBytes,
    TruncatedFile,
)
from src.occupancy.grid import OccGrid, _check_labels

logger = logging.getLogger(__name__)

PROB_TOL = 1e-6
PROB_CLAMP = 1e-12
DEFAULT_LOSS_LAMBDA = 1.0

FEAT_MAGIC = b"FEAT"
_FEAT_HEADER = struct.Struct("<4sIIII")


class WeightOrder(str, Enum):
    """Which end of the frequency ranking receives weight 1."""

    ASCENDING = "ascending"  # most frequent class -> 1
    DESCENDING = "descending"  # rarest class -> 1


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Per-voxel class scores, shape ``(X, Y, Z, C)``."""

    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if scores.ndim != 4 or scores.shape[3] < 1:
            raise InvalidDims("feature scores must have shape (X, Y, Z, C)")
        if min(scores.shape[:3]) < 1:
            raise InvalidDims("feature grid dims must be positive")
        if not np.all(np.isfinite(scores)):
            raise InvalidDims("feature scores must be finite")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def dims(self):
        return tuple(int(d) for d in self.scores.shape[:3])

    @property
    def num_classes(self) -> int:
        return int(self.scores.shape[3])

    def is_probability(self, tol: float = PROB_TOL) -> bool:
        if np.any(self.scores < 0):
            return False
        return bool(np.all(np.abs(self.scores.sum(axis=3) - 1.0) <= tol))

    def require_probability(self) -> None:
        if not self.is_probability():
            raise NotProbability(
                "scores must be non-negative and sum to 1 per voxel"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return np.array_equal(self.scores, other.scores)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ClassWeights:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64, copy=True)
        if alpha.ndim != 1 or np.any(alpha <= 0) or np.any(alpha > 1):
            raise InvalidParameter("class weights must lie in (0, 1]")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def ones(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes))


@dataclass(frozen=True)
class LossReport:
    softmax_ce: float
    lovasz: float
    lam: float

    @property
    def total(self) -> float:
        return self.softmax_ce + self.lam * self.lovasz

    def to_dict(self) -> Dict[str, float]:
        return {
            "softmax_ce": self.softmax_ce,
            "lovasz": self.lovasz,
            "lambda": self.lam,
            "total": self.total,
        }


def _check_same(a: FeatureGrid, b: FeatureGrid) -> None:
    if a.scores.shape != b.scores.shape:
        raise DimMismatch(
            f"feature grids differ: {a.scores.shape} vs {b.scores.shape}"
        )


def _check_gt(f: FeatureGrid, gt: OccGrid) -> None:
    if f.dims != gt.dims:
        raise DimMismatch(f"features {f.dims} vs ground truth {gt.dims}")
    if gt.labels.size and int(gt.labels.max()) >= f.num_classes:
        raise DimMismatch(
            f"ground truth label {int(gt.labels.max())} has no channel "
            f"in a {f.num_classes}-class feature grid"
        )


# Refiners


class Refiner(ABC):
    """Feature-grid transform applied before the final argmax."""

    name: str = "refiner"

    @abstractmethod
    def refine(self, f: FeatureGrid) -> FeatureGrid:
        """Return a feature grid with the same dims and class count."""

    def __call__(self, f: FeatureGrid) -> FeatureGrid:
        out = self.refine(f)
        _check_same(f, out)
        return out


class IdentityRefiner(Refiner):
    name = "identity"

    def refine(self, f: FeatureGrid) -> FeatureGrid:
        return f


class AffineRefiner(Refiner):
    """Per-class ``scale * score + bias``; a diagnostic stand-in."""

    name = "affine"

    def __init__(
        self,
        scale: Iterable[float],
        bias: Optional[Iterable[float]] = None,
    ):
        try:
            self.scale = np.asarray(list(scale), dtype=np.float64)
            self.bias = (
                np.zeros_like(self.scale)
                if bias is None
                else np.asarray(list(bias), dtype=np.float64)
            )
        except (TypeError, ValueError) as e:
            raise InvalidParameter(
                f"affine scale and bias must be number lists: {e}"
            ) from e
        if self.scale.shape != self.bias.shape:
            raise InvalidParameter("affine scale and bias lengths differ")

    def refine(self, f: FeatureGrid) -> FeatureGrid:
        if self.scale.shape[0] != f.num_classes:
            raise DimMismatch(
                f"affine refiner has {self.scale.shape[0]} classes, "
                f"features have {f.num_classes}"
            )
        return FeatureGrid(f.scores * self.scale + self.bias)


class FileRefiner(Refiner):
    """Replaces the features with a FEAT dump written by an external tool."""

    name = "file"

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def refine(self, f: FeatureGrid) -> FeatureGrid:
        refined = load_feature_grid(self.path)
        _check_same(f, refined)
        logger.info("refined features read from %s", self.path)
        return refined


def get_refiner(kind: Optional[str] = None, **kwargs) -> Refiner:
    """
    Factory for refiners.

    Args:
      kind: One of 'identity' (default), 'affine', 'file'.
      **kwargs: Constructor arguments (``scale``/``bias`` or ``path``).

    Returns:
      Configured Refiner instance
    """
    kind = kind or "identity"
    if kind == "identity":
        return IdentityRefiner()
    elif kind == "affine":
        if "scale" not in kwargs:
            raise InvalidParameter("affine refiner needs a scale")
        return AffineRefiner(kwargs["scale"], kwargs.get("bias"))
    elif kind == "file":
        if "path" not in kwargs:
            raise InvalidParameter("file refiner needs a path")
        return FileRefiner(kwargs["path"])
    raise InvalidParameter(
        f"Unknown refiner: {kind}. Valid options: identity, affine, file"
    )


# Fusion operators


def one_hot(grid: OccGrid, num_classes: Optional[int] = None) -> FeatureGrid:
    c = grid.num_classes if num_classes is None else int(num_classes)
    if c < 1:
        raise InvalidParameter(f"class count must be positive, got {c}")
    _check_labels(grid.labels, c)
    scores = np.zeros(grid.dims + (c,), dtype=np.float64)
    np.put_along_axis(
        scores, grid.labels[..., None].astype(np.int64), 1.0, axis=3
    )
    return FeatureGrid(scores)


def class_histogram(grid: OccGrid, num_classes: int) -> np.ndarray:
    _check_labels(grid.labels, num_classes)
    return np.bincount(grid.flat, minlength=num_classes).astype(np.int64)


def class_weights(
    coarse: OccGrid,
    num_classes: Optional[int] = None,
    order: WeightOrder | str = WeightOrder.ASCENDING,
) -> ClassWeights:
    """Frequency-rank weights ``alpha[i] = (rank_i + 1) / C``.

    ``ascending`` ranks by ascending count so the most frequent class gets
    weight 1; ``descending`` ranks the other way. Ties go by class id.
    """
    c = coarse.num_classes if num_classes is None else int(num_classes)
    order = WeightOrder(order)
    counts = class_histogram(coarse, c)
    ids = np.arange(c)
    key = counts if order is WeightOrder.ASCENDING else -counts
    ranked = np.lexsort((ids, key))
    rank = np.empty(c, dtype=np.int64)
    rank[ranked] = np.arange(c)
    return ClassWeights((rank + 1) / c)


def gated_fuse(a: FeatureGrid, b: FeatureGrid, w: float) -> FeatureGrid:
    """``(1 - w) * a + w * b``."""
    _check_same(a, b)
    if not 0.0 <= w <= 1.0:
        raise InvalidParameter(f"gate weight must be in [0, 1], got {w}")
    return FeatureGrid((1.0 - w) * a.scores + w * b.scores)


def apply_weights(f: FeatureGrid, alpha: ClassWeights) -> FeatureGrid:
    if alpha.alpha.shape[0] != f.num_classes:
        raise DimMismatch(
            f"{alpha.alpha.shape[0]} weights for {f.num_classes} classes"
        )
    return FeatureGrid(f.scores * alpha.alpha)


def refine_argmax(
    f: FeatureGrid,
    refiner: Optional[Refiner] = None,
    template: Optional[OccGrid] = None,
) -> OccGrid:
    """Refine, then argmax per voxel; ties resolve to the smallest id.

    ``template`` supplies the output metadata; without one the defaults are
    used with ``num_classes`` taken from the feature grid.
    """
    refined = (refiner or IdentityRefiner())(f)
    labels = np.argmax(refined.scores, axis=3).astype(np.uint8)
    if template is not None:
        if template.dims != f.dims:
            raise DimMismatch(f"template {template.dims} vs features {f.dims}")
        return template.with_labels(labels)
    return OccGrid(labels=labels, num_classes=f.num_classes)


def quality_fuse(
    pred_a: OccGrid,
    pred_b: OccGrid,
    w: float = 0.5,
    refiner: Optional[Refiner] = None,
    order: WeightOrder | str = WeightOrder.ASCENDING,
) -> OccGrid:
    """Fuse two coarse predictions; ``pred_b`` supplies the class weights."""
    if pred_a.dims != pred_b.dims:
        raise DimMismatch(f"predictions differ: {pred_a.dims} vs {pred_b.dims}")
    c = max(pred_a.num_classes, pred_b.num_classes)
    fused = gated_fuse(one_hot(pred_a, c), one_hot(pred_b, c), w)
    weighted = apply_weights(fused, class_weights(pred_b, c, order))
    return refine_argmax(weighted, refiner, template=pred_a)


# Losses


def softmax_ce(
    pred: FeatureGrid, gt: OccGrid, ignore_free: bool = False
) -> float:
    """Mean ``-log p[v, gt(v)]`` with probabilities clamped at 1e-12."""
    pred.require_probability()
    _check_gt(pred, gt)
    labels = gt.labels.astype(np.int64)
    p = np.take_along_axis(pred.scores, labels[..., None], axis=3)[..., 0]
    nll = -np.log(np.maximum(p, PROB_CLAMP)).reshape(-1)
    if ignore_free:
        nll = nll[gt.flat != 0]
    if nll.size == 0:
        return 0.0
    return float(np.sum(nll) / nll.size)


def _lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_per_class(
    pred: FeatureGrid,
    gt: OccGrid,
    class_set: Optional[Iterable[int]] = None,
) -> Dict[int, float]:
    """Lovasz-softmax value of every class present in ``gt``.

    ``class_set`` restricts the candidates; classes absent from ``gt`` are
    skipped.
    """
    pred.require_probability()
    _check_gt(pred, gt)
    probs = pred.scores.reshape(-1, pred.num_classes)
    labels = gt.flat
    candidates = (
        range(pred.num_classes) if class_set is None else sorted(set(class_set))
    )
    out: Dict[int, float] = {}
    for c in candidates:
        if not 0 <= c < pred.num_classes:
            raise InvalidParameter(f"class {c} not in [0, {pred.num_classes})")
        fg = (labels == c).astype(np.float64)
        if fg.sum() == 0:
            continue
        errors = np.abs(fg - probs[:, c])
        perm = np.argsort(-errors, kind="stable")
        out[c] = float(np.dot(errors[perm], _lovasz_grad(fg[perm])))
    return out


def lovasz_softmax(
    pred: FeatureGrid,
    gt: OccGrid,
    class_set: Optional[Iterable[int]] = None,
) -> float:
    """Mean of ``lovasz_per_class``; 0 when no candidate class is present."""
    values = lovasz_per_class(pred, gt, class_set)
    if not values:
        return 0.0
    return float(np.mean([values[c] for c in sorted(values)]))


def combined_loss(
    pred: FeatureGrid,
    gt: OccGrid,
    lam: float = DEFAULT_LOSS_LAMBDA,
    class_set: Optional[Iterable[int]] = None,
    ignore_free: bool = False,
) -> LossReport:
    return LossReport(
        softmax_ce=softmax_ce(pred, gt, ignore_free=ignore_free),
        lovasz=lovasz_softmax(pred, gt, class_set),
        lam=float(lam),
    )


# FEAT files


def encode_feature_grid(f: FeatureGrid) -> bytes:
    x, y, z = f.dims
    header = _FEAT_HEADER.pack(FEAT_MAGIC, x, y, z, f.num_classes)
    return header + f.scores.astype("<f4").tobytes(order="C")


def decode_feature_grid(data: bytes) -> FeatureGrid:
    if len(data) < 4:
        raise TruncatedFile("file ends before FEAT magic")
    if data[:4] != FEAT_MAGIC:
        raise BadMagic(f"expected {FEAT_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _FEAT_HEADER.size:
        raise TruncatedFile("file ends inside the FEAT header")
    _, x, y, z, c = _FEAT_HEADER.unpack_from(data, 0)
    count = x * y * z * c
    expected = _FEAT_HEADER.size + 4 * count
    if len(data) < expected:
        raise TruncatedFile(f"FEAT payload needs {expected} bytes")
    if len(data) > expected:
        raise TrailingBytes(f"{len(data) - expected} bytes after FEAT payload")
    scores = np.frombuffer(
        data, dtype="<f4", count=count, offset=_FEAT_HEADER.size
    )
    return FeatureGrid(scores.reshape(x, y, z, c).astype(np.float64))


def save_feature_grid(f: FeatureGrid, path: str | Path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_feature_grid(f))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_feature_grid(path: str | Path) -> FeatureGrid:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    return decode_feature_grid(data)


__all__: List[str] = [
    "AffineRefiner",
    "ClassWeights",
    "FeatureGrid",
    "FileRefiner",
    "IdentityRefiner",
    "LossReport",
    "Refiner",
    "WeightOrder",
    "apply_weights",
    "class_histogram",
    "class_weights",
    "combined_loss",
    "gated_fuse",
    "get_refiner",
    "load_feature_grid",
    "lovasz_per_class",
    "lovasz_softmax",
    "one_hot",
    "quality_fuse",
    "refine_argmax",
    "save_feature_grid",
    "softmax_ce",
]
