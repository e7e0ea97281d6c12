"""
BEV scene flow between consecutive height maps.

Flow is carried by one global homography ``M`` that maps frame-0 cell
coordinates to frame-1 cell coordinates (``B1 ~ M o B0``). It is estimated
in three stages:

1. block matching on the height rasters produces point correspondences,
2. RANSAC over 4-point minimal samples rejects moving objects,
3. normalized DLT (Hartley normalization, homogeneous least squares via the
   eigenvector of the smallest eigenvalue of ``A^T A``) fits the model.

Per-cell displacement is ``pi(M [x, y, 1]^T) - (x, y)`` where ``pi`` is the
perspective division.
"""

from __future__ import annotations

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.occupancy.bev import EMPTY_HEIGHT, BevMap
from src.occupancy.errors import (
    BadMagic,
    DegenerateConfiguration,
    DimMismatch,
    InvalidDims,
    InvalidParameter,
    IoFailure,
    ProjectiveDivideByZero,
    SingularHomography,
    TooFewCorrespondences,
    TooFewInliers,
    TrailingBytes,
    TruncatedFile,
)

logger = logging.getLogger(__name__)

DET_EPS = 1e-12
W_EPS = 1e-12
# minimal samples whose smallest triangle is this small relative to the
# sample extent are treated as collinear
COLLINEAR_EPS = 1e-6

FLOW_MAGIC = b"FLOW"
_FLOW_HEADER = struct.Struct("<4sII")


class FlowParams(BaseModel):
    """Block-matching and robust-fitting parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    block_size: int = Field(default=9, ge=3)
    search_radius: int = Field(default=12, ge=1)
    min_texture: float = Field(default=0.5, ge=0.0)
    ransac_iters: int = Field(default=1000, ge=1)
    inlier_thresh: float = Field(default=1.0, gt=0.0)
    min_inliers: int = Field(default=12, ge=4)
    # RANSAC stops once a sample set this likely to be outlier-free was seen
    ransac_confidence: float = Field(default=0.99, gt=0.0, lt=1.0)
    # re-matching passes against the fitted homography
    refine_passes: int = Field(default=2, ge=0)
    refine_radius: int = Field(default=2, ge=1)
    seed: int = Field(default=42, ge=0, lt=2**64)

    @field_validator("block_size")
    @classmethod
    def _block_size_odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("block_size must be odd")
        return v


@dataclass(frozen=True, eq=False)
class Homography:
    """Invertible 3x3 projective transform on cell coordinates."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64, copy=True)
        if m.shape != (3, 3):
            raise InvalidDims(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SingularHomography("homography has non-finite entries")
        det = float(np.linalg.det(m))
        if abs(det) <= DET_EPS:
            raise SingularHomography(
                f"homography determinant {det:.3e} is not invertible"
            )
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def similarity(
        cls,
        angle_deg: float,
        tx: float = 0.0,
        ty: float = 0.0,
        scale: float = 1.0,
        center: Tuple[float, float] = (0.0, 0.0),
    ) -> "Homography":
        """Rotation and scale about ``center`` followed by a translation."""
        theta = np.deg2rad(angle_deg)
        c, s = scale * np.cos(theta), scale * np.sin(theta)
        cx, cy = center
        return cls(
            np.array(
                [
                    [c, -s, cx - c * cx + s * cy + tx],
                    [s, c, cy - s * cx - c * cy + ty],
                    [0.0, 0.0, 1.0],
                ]
            )
        )

    @classmethod
    def rotation(
        cls, angle_deg: float, center: Tuple[float, float] = (0.0, 0.0)
    ) -> "Homography":
        return cls.similarity(angle_deg, center=center)

    def normalized(self) -> "Homography":
        """Scale so that ``m[2][2] == 1`` (unchanged when m22 is ~0)."""
        if abs(self.m[2, 2]) <= W_EPS:
            return self
        return Homography(self.m / self.m[2, 2])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m)).normalized()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(N, 2)`` points through the transform."""
        projected, ok = _project(self.m, np.asarray(points, dtype=np.float64))
        if not ok.all():
            raise ProjectiveDivideByZero(
                "a point maps to the plane at infinity"
            )
        return projected

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.m, np.eye(3)))

    def as_rows(self) -> List[float]:
        """The nine entries in row-major order."""
        return [float(v) for v in self.m.reshape(-1)]

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Homography):
            return NotImplemented
        return bool(np.array_equal(self.m, other.m))

    __hash__ = None

    def __repr__(self) -> str:
        rows = ", ".join(f"{v:.6g}" for v in self.as_rows())
        return f"Homography([{rows}])"


@dataclass(frozen=True)
class Correspondence:
    """A block center in B0 and its best match in B1 (cell coordinates)."""

    src: Tuple[float, float]
    dst: Tuple[float, float]
    score: float


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-cell ``(dx, dy)`` displacement, shape ``(width, height, 2)``."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise InvalidDims("flow vectors must have shape (W, H, 2)")
        if not np.all(np.isfinite(vectors)):
            raise InvalidDims("flow vectors must be finite")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def width(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def height(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class FlowEstimate:
    """Outcome of ``estimate_flow``; ``fallback`` names the error code when
    the identity homography was substituted."""

    homography: Homography
    correspondences: List[Correspondence] = field(default_factory=list)
    inliers: Optional[np.ndarray] = None
    fallback: Optional[str] = None

    @property
    def inlier_count(self) -> int:
        return 0 if self.inliers is None else int(self.inliers.sum())


def _project(m: np.ndarray, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ph = np.c_[pts, np.ones(len(pts))]
    q = ph @ m.T
    w = q[:, 2]
    ok = np.abs(w) > W_EPS
    safe = np.where(ok, w, 1.0)
    out = np.c_[q[:, 0] / safe, q[:, 1] / safe]
    out[~ok] = np.inf
    return out, ok


# Block matching


def _pair_cost(
    block: np.ndarray,
    block_empty: np.ndarray,
    cand: np.ndarray,
    cand_empty: np.ndarray,
    penalty: float,
) -> np.ndarray:
    """SSD over the trailing block axes, with the empty-column penalty."""
    both = ~block_empty & ~cand_empty
    one = block_empty ^ cand_empty
    cell_cost = np.where(both, (cand - block) ** 2, 0.0) + np.where(
        one, penalty, 0.0
    )
    return cell_cost.reshape(cell_cost.shape[:2] + (-1,)).sum(axis=-1)


def _equiangular(c_minus: float, c0: float, c_plus: float) -> float:
    """Sub-cell offset of the minimum of a V-shaped cost profile.

    Two lines of equal and opposite slope through the three samples; SSD on
    nearest-neighbour rasters grows linearly with a fractional shift. An
    exact match (``c0 == 0``) stays on the integer offset.
    """
    if not (np.isfinite(c_minus) and np.isfinite(c_plus)) or c0 <= 0.0:
        return 0.0
    denom = max(c_minus, c_plus) - c0
    if denom <= 0.0:
        return 0.0
    return float(np.clip((c_minus - c_plus) / (2.0 * denom), -0.5, 0.5))


def _best_offset(
    cost: np.ndarray,
    dx: np.ndarray,
    dy: np.ndarray,
    complete: np.ndarray,
) -> Optional[Tuple[float, float, float]]:
    """Sub-cell ``(dx, dy, cost)`` at the minimum of a square cost grid.

    Ties go to the smallest displacement, then smallest dy, then dx. Only
    minima whose candidate block lies fully inside the raster (``complete``)
    get a sub-cell correction.
    """
    flat = cost.ravel()
    dist2 = (dx**2 + dy**2).ravel()
    order = np.lexsort((dx.ravel(), dy.ravel(), dist2, flat))
    best = int(order[0])
    if not np.isfinite(flat[best]):
        return None
    i, j = np.unravel_index(best, cost.shape)
    n, m = cost.shape
    c0 = float(cost[i, j])
    fx = fy = 0.0
    if complete[i, j]:
        if 0 < i < n - 1:
            fx = _equiangular(
                float(cost[i - 1, j]), c0, float(cost[i + 1, j])
            )
        if 0 < j < m - 1:
            fy = _equiangular(
                float(cost[i, j - 1]), c0, float(cost[i, j + 1])
            )
    return float(dx[i, j]) + fx, float(dy[i, j]) + fy, c0


def _offset_cost(
    h0: np.ndarray,
    empty0: np.ndarray,
    padded1: np.ndarray,
    empty1: np.ndarray,
    offset: Tuple[int, int],
    r: int,
    tiles: Tuple[int, int],
    bs: int,
    penalty: float,
) -> np.ndarray:
    """Cost of shifting every lattice block by one offset, shape ``tiles``."""
    width, height = h0.shape
    ox, oy = offset
    cand = padded1[r + ox : r + ox + width, r + oy : r + oy + height]
    cand_empty = empty1[r + ox : r + ox + width, r + oy : r + oy + height]
    both = ~empty0 & ~cand_empty
    one = empty0 ^ cand_empty
    cell = np.where(both, (cand - h0) ** 2, 0.0) + np.where(one, penalty, 0.0)
    nx, ny = tiles
    return cell[: nx * bs, : ny * bs].reshape(nx, bs, ny, bs).sum(axis=(1, 3))


def match_blocks(
    b0: BevMap, b1: BevMap, p: FlowParams, threads: int = 1
) -> List[Correspondence]:
    """SSD block matching on a regular lattice of block centers.

    Blocks tile the map from the origin; those whose height variance is
    below ``p.min_texture`` are skipped. A cell pair where exactly one side
    is an empty column costs ``depth``; two empty cells cost nothing.
    Cells beyond the map count as empty. Each match carries a sub-cell
    correction. Results are in lattice order (x-major).
    """
    if b0.heights.shape != b1.heights.shape or b0.depth != b1.depth:
        raise DimMismatch(
            f"BEV maps differ: {b0.heights.shape} vs {b1.heights.shape}"
        )
    width, height = b0.heights.shape
    bs = p.block_size
    half = bs // 2
    r = p.search_radius
    tiles = (width // bs, height // bs)
    if tiles[0] == 0 or tiles[1] == 0:
        return []

    h0 = b0.heights.astype(np.float64)
    empty0 = h0 == EMPTY_HEIGHT
    padded1 = np.pad(
        b1.heights.astype(np.float64), r, constant_values=EMPTY_HEIGHT
    )
    empty1 = padded1 == EMPTY_HEIGHT
    penalty = float(b0.depth)

    steps = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(steps, steps, indexing="ij")
    offsets = list(zip(dx.ravel().tolist(), dy.ravel().tolist()))

    def work(offset: Tuple[int, int]) -> np.ndarray:
        return _offset_cost(
            h0, empty0, padded1, empty1, offset, r, tiles, bs, penalty
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_offset = list(pool.map(work, offsets))
    else:
        per_offset = [work(o) for o in offsets]
    costs = np.stack(per_offset, axis=-1).reshape(
        tiles + (2 * r + 1, 2 * r + 1)
    )

    corrs: List[Correspondence] = []
    for i in range(tiles[0]):
        for j in range(tiles[1]):
            block = h0[i * bs : (i + 1) * bs, j * bs : (j + 1) * bs]
            if float(np.var(block)) < p.min_texture:
                continue
            cx, cy = i * bs + half, j * bs + half
            in_bounds = (
                (cx + dx >= 0)
                & (cx + dx < width)
                & (cy + dy >= 0)
                & (cy + dy < height)
            )
            complete = (
                (cx + dx - half >= 0)
                & (cx + dx + half < width)
                & (cy + dy - half >= 0)
                & (cy + dy + half < height)
            )
            cost = np.where(in_bounds, costs[i, j], np.inf)
            best = _best_offset(cost, dx, dy, complete)
            if best is None:
                continue
            bdx, bdy, score = best
            corrs.append(
                Correspondence(
                    src=(float(cx), float(cy)),
                    dst=(cx + bdx, cy + bdy),
                    score=score,
                )
            )
    logger.debug(
        "block matching: %d of %d blocks textured",
        len(corrs),
        tiles[0] * tiles[1],
    )
    return corrs


# Normalized DLT


def _normalize_points(
    pts: np.ndarray,
) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Hartley normalization: centroid at the origin, mean distance sqrt(2).

    Returns normalized points, T and T^-1.
    """
    c = pts.mean(axis=0)
    d = float(np.sqrt(((pts - c) ** 2).sum(axis=1)).mean())
    if d <= 1e-12:
        return None
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    t_inv = np.array(
        [[1.0 / s, 0.0, c[0]], [0.0, 1.0 / s, c[1]], [0.0, 0.0, 1.0]]
    )
    return (pts - c) * s, t, t_inv


def _build_a(xy: np.ndarray, uv: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    u, v = uv[:, 0], uv[:, 1]
    n = len(xy)
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.zeros((2 * n, 9))
    a[0::2] = np.c_[x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u]
    a[1::2] = np.c_[zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v]
    return a


def normalized_dlt(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """Least-squares homography ``dst ~ H src``, scaled to ``H[2,2] = 1``.

    Returns None when the system is degenerate.
    """
    ns = _normalize_points(src)
    nd = _normalize_points(dst)
    if ns is None or nd is None:
        return None
    src_n, t0, _ = ns
    dst_n, _, t1_inv = nd
    a = _build_a(src_n, dst_n)
    _, vecs = np.linalg.eigh(a.T @ a)
    h_n = vecs[:, 0].reshape(3, 3)
    h = t1_inv @ h_n @ t0
    if not np.all(np.isfinite(h)) or abs(h[2, 2]) <= W_EPS:
        return None
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= DET_EPS:
        return None
    return h


def _has_collinear_triple(pts: np.ndarray) -> bool:
    extent = float(((pts.max(axis=0) - pts.min(axis=0)) ** 2).sum())
    if extent <= 0.0:
        return True
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u = pts[j] - pts[i]
        v = pts[k] - pts[i]
        area = 0.5 * abs(u[0] * v[1] - u[1] * v[0])
        if area <= COLLINEAR_EPS * extent:
            return True
    return False


def _symmetric_transfer(
    m: np.ndarray, src: np.ndarray, dst: np.ndarray
) -> np.ndarray:
    fwd, _ = _project(m, src)
    bwd, _ = _project(np.linalg.inv(m), dst)
    with np.errstate(invalid="ignore", over="ignore"):
        err = np.sqrt(((fwd - dst) ** 2).sum(1) + ((bwd - src) ** 2).sum(1))
    return np.where(np.isfinite(err), err, np.inf)


def _ransac_bound(inlier_ratio: float, confidence: float) -> int:
    """Iterations after which an all-inlier 4-sample was drawn with
    probability ``confidence``, given the inlier ratio seen so far."""
    p_good = inlier_ratio**4
    if p_good <= 0.0:
        return np.iinfo(np.int64).max
    if p_good >= 1.0:
        return 1
    return int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - p_good)))


def estimate_homography(
    corrs: Sequence[Correspondence], p: FlowParams
) -> Tuple[Homography, np.ndarray]:
    """RANSAC + normalized DLT; returns the homography and inlier mask.

    Iteration ``i`` draws its sample from a generator seeded with
    ``(p.seed, i)``. The best hypothesis has the most inliers (ties: lower
    squared inlier error); the final model is refit on all its inliers.
    Sampling stops early once ``log(1 - confidence) / log(1 - e^4)``
    iterations have run, ``e`` being the best inlier ratio so far.
    """
    n = len(corrs)
    if n < 4:
        raise TooFewCorrespondences(
            f"need at least 4 correspondences, got {n}", {"count": n}
        )
    src = np.array([c.src for c in corrs], dtype=np.float64)
    dst = np.array([c.dst for c in corrs], dtype=np.float64)
    thresh = p.inlier_thresh

    best_m: Optional[np.ndarray] = None
    best_mask: Optional[np.ndarray] = None
    best_count = -1
    best_score = np.inf
    needed = p.ransac_iters
    for i in range(p.ransac_iters):
        if i >= needed:
            break
        rng = np.random.default_rng([p.seed, i])
        idx = rng.choice(n, size=4, replace=False)
        if _has_collinear_triple(src[idx]) or _has_collinear_triple(dst[idx]):
            continue
        m = normalized_dlt(src[idx], dst[idx])
        if m is None:
            continue
        err = _symmetric_transfer(m, src, dst)
        mask = err < thresh
        count = int(mask.sum())
        score = float(np.sum(err[mask] ** 2))
        if count > best_count or (count == best_count and score < best_score):
            best_m, best_mask = m, mask
            best_count, best_score = count, score
            if count == n:
                break
            needed = min(
                needed, _ransac_bound(count / n, p.ransac_confidence)
            )

    if best_m is None:
        raise DegenerateConfiguration(
            "every minimal sample was collinear or degenerate"
        )
    if best_count < p.min_inliers:
        raise TooFewInliers(
            f"{best_count} inliers, need {p.min_inliers}",
            {"inliers": best_count, "required": p.min_inliers},
        )

    refit = normalized_dlt(src[best_mask], dst[best_mask])
    if refit is None:
        refit = best_m
    mask = _symmetric_transfer(refit, src, dst) < thresh
    if int(mask.sum()) < p.min_inliers:
        refit, mask = best_m, best_mask
    return Homography(refit), mask


def refine_correspondences(
    b0: BevMap,
    b1: BevMap,
    corrs: Sequence[Correspondence],
    h: Homography,
    p: FlowParams,
) -> List[Correspondence]:
    """Re-match every block against ``b1`` sampled along ``h``.

    Each block's cells are pushed through ``h`` and shifted by integer
    offsets within ``p.refine_radius``; the best offset plus its sub-cell
    correction is added to the block center's image. Sampling the warped
    block removes the rotation and scale that a translation-only search
    cannot follow. Blocks whose center leaves the plane keep their match.
    """
    if not corrs:
        return []
    h0 = b0.heights.astype(np.float64)
    h1 = b1.heights.astype(np.float64)
    width, height = h1.shape
    half = p.block_size // 2
    local = np.arange(-half, half + 1)
    lx, ly = np.meshgrid(local, local, indexing="ij")
    shape_offsets = np.c_[lx.ravel(), ly.ravel()]

    src = np.array([c.src for c in corrs], dtype=np.float64)
    cells = src[:, None, :] + shape_offsets[None, :, :]
    n, b = cells.shape[:2]
    ci = cells.astype(np.int64)
    block = h0[ci[..., 0], ci[..., 1]]

    mapped, ok = _project(h.m, cells.reshape(-1, 2))
    mapped = np.where(ok[:, None], mapped, -1e6).reshape(n, b, 2)
    ok = ok.reshape(n, b)
    centers, center_ok = _project(h.m, src)

    r = p.refine_radius
    steps = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(steps, steps, indexing="ij")
    shifts = np.c_[dx.ravel(), dy.ravel()].astype(np.float64)

    pos = np.floor(mapped[:, None] + shifts[None, :, None] + 0.5)
    qx, qy = pos[..., 0], pos[..., 1]
    inside = (
        ok[:, None] & (qx >= 0) & (qx < width) & (qy >= 0) & (qy < height)
    )
    qx = np.clip(qx, 0, width - 1).astype(np.int64)
    qy = np.clip(qy, 0, height - 1).astype(np.int64)
    cand = np.where(inside, h1[qx, qy], float(EMPTY_HEIGHT))

    block_b = np.broadcast_to(block[:, None, :], cand.shape)
    cost = _pair_cost(
        block_b,
        block_b == EMPTY_HEIGHT,
        cand,
        cand == EMPTY_HEIGHT,
        float(b0.depth),
    ).reshape(n, 2 * r + 1, 2 * r + 1)
    complete = inside.all(axis=-1).reshape(n, 2 * r + 1, 2 * r + 1)

    refined: List[Correspondence] = []
    for k, corr in enumerate(corrs):
        best = None
        if center_ok[k]:
            best = _best_offset(cost[k], dx, dy, complete[k])
        if best is None:
            refined.append(corr)
            continue
        ox, oy, score = best
        refined.append(
            Correspondence(
                src=corr.src,
                dst=(
                    float(centers[k, 0]) + ox,
                    float(centers[k, 1]) + oy,
                ),
                score=score,
            )
        )
    return refined


def _refine_fit(
    b0: BevMap,
    b1: BevMap,
    corrs: List[Correspondence],
    h: Homography,
    inliers: np.ndarray,
    p: FlowParams,
) -> Tuple[Homography, np.ndarray, List[Correspondence]]:
    for _ in range(p.refine_passes):
        refined = refine_correspondences(b0, b1, corrs, h, p)
        src = np.array([c.src for c in refined], dtype=np.float64)
        dst = np.array([c.dst for c in refined], dtype=np.float64)
        m = normalized_dlt(src[inliers], dst[inliers])
        if m is None:
            break
        mask = _symmetric_transfer(m, src, dst) < p.inlier_thresh
        if int(mask.sum()) < p.min_inliers:
            break
        h, inliers, corrs = Homography(m), mask, refined
    return h, inliers, corrs


def estimate_flow(
    b0: BevMap, b1: BevMap, p: FlowParams, threads: int = 1
) -> FlowEstimate:
    """Match, fit and refine, substituting the identity when fitting fails."""
    corrs = match_blocks(b0, b1, p, threads=threads)
    try:
        h, inliers = estimate_homography(corrs, p)
    except (
        TooFewCorrespondences,
        DegenerateConfiguration,
        TooFewInliers,
    ) as e:
        logger.warning(
            "flow estimation fell back to identity (%s): %s",
            e.code.value,
            e.message,
        )
        return FlowEstimate(
            homography=Homography.identity(),
            correspondences=corrs,
            fallback=e.code.value,
        )
    h, inliers, corrs = _refine_fit(b0, b1, corrs, h, inliers, p)
    logger.info(
        "flow estimated from %d correspondences, %d inliers",
        len(corrs),
        int(inliers.sum()),
    )
    return FlowEstimate(homography=h, correspondences=corrs, inliers=inliers)


def flow_field(h: Homography, width: int, height: int) -> FlowField:
    """Dense displacement ``pi(M [x, y, 1]) - (x, y)`` for every cell."""
    xs, ys = np.meshgrid(
        np.arange(width, dtype=np.float64),
        np.arange(height, dtype=np.float64),
        indexing="ij",
    )
    m = h.m
    px = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    py = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    pw = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    if np.any(np.abs(pw) <= W_EPS):
        raise ProjectiveDivideByZero(
            "homography maps a grid cell to the plane at infinity"
        )
    return FlowField(np.stack([px / pw - xs, py / pw - ys], axis=-1))


def compose(h: Homography, k: int) -> Homography:
    """``M^k``: constant-velocity extrapolation over ``k`` frames."""
    if int(k) != k or k < 1:
        raise InvalidParameter(f"compose needs a positive integer, got {k}")
    return Homography(np.linalg.matrix_power(h.m, int(k))).normalized()


def transfer_error(
    h_est: Homography, h_true: Homography, points: np.ndarray
) -> float:
    """Mean symmetric transfer error of ``h_est`` against ``h_true``.

    Per point: half the sum of the forward error ``|H_est p - H_true p|``
    and the backward error ``|H_est^-1 q - p|`` with ``q = H_true p``.
    """
    points = np.asarray(points, dtype=np.float64)
    q = h_true.apply(points)
    fwd = np.linalg.norm(h_est.apply(points) - q, axis=1)
    bwd = np.linalg.norm(h_est.inverse().apply(q) - points, axis=1)
    return float(np.mean(0.5 * (fwd + bwd)))


def grid_points(width: int, height: int) -> np.ndarray:
    """All cell coordinates of a ``width x height`` map, x-major."""
    xs, ys = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
    return np.c_[xs.ravel(), ys.ravel()].astype(np.float64)


# Files


def encode_flow_field(flow: FlowField) -> bytes:
    header = _FLOW_HEADER.pack(FLOW_MAGIC, flow.width, flow.height)
    return header + flow.vectors.astype("<f4").tobytes(order="C")


def save_flow_field(flow: FlowField, path: str | Path) -> None:
    """FLOW raster: magic, u32 w, u32 h, then (dx, dy) f32 pairs, x-major."""
    try:
        with open(path, "wb") as fh:
            fh.write(encode_flow_field(flow))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_flow_field(path: str | Path) -> FlowField:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if len(data) < 4:
        raise TruncatedFile("file ends before FLOW magic")
    if data[:4] != FLOW_MAGIC:
        raise BadMagic(f"expected {FLOW_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _FLOW_HEADER.size:
        raise TruncatedFile("file ends inside the FLOW header")
    _, w, h = _FLOW_HEADER.unpack_from(data, 0)
    expected = _FLOW_HEADER.size + 8 * w * h
    if len(data) < expected:
        raise TruncatedFile(f"FLOW payload needs {expected} bytes")
    if len(data) > expected:
        raise TrailingBytes(f"{len(data) - expected} bytes after FLOW payload")
    vectors = np.frombuffer(
        data, dtype="<f4", count=2 * w * h, offset=_FLOW_HEADER.size
    )
    return FlowField(vectors.reshape(w, h, 2).astype(np.float64))


def save_correspondences_csv(
    corrs: Sequence[Correspondence],
    path: str | Path,
    inliers: Optional[np.ndarray] = None,
) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["src_x", "src_y", "dst_x", "dst_y", "score", "inlier"]
            )
            for i, c in enumerate(corrs):
                flag = "" if inliers is None else int(bool(inliers[i]))
                writer.writerow(
                    [c.src[0], c.src[1], c.dst[0], c.dst[1], c.score, flag]
                )
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def save_matrix_text(h: Homography, path: str | Path) -> None:
    """Row-major matrix, three rows of three numbers."""
    rows = h.m
    text = "\n".join(" ".join(f"{v:.12g}" for v in row) for row in rows)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


__all__ = [
    "Correspondence",
    "FlowEstimate",
    "FlowField",
    "FlowParams",
    "Homography",
    "compose",
    "estimate_flow",
    "estimate_homography",
    "flow_field",
    "grid_points",
    "load_flow_field",
    "match_blocks",
    "normalized_dlt",
    "refine_correspondences",
    "save_correspondences_csv",
    "save_flow_field",
    "save_matrix_text",
    "transfer_error",
]
