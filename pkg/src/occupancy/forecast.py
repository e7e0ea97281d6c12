"""
Coarse future frames from BEV flow, and the Copy&Paste baseline.

Whole columns move together: warping only relocates ``(x, y)`` columns and
never changes a column's contents.
"""

from __future__ import annotations

import logging
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.occupancy.bev import project_height
from src.occupancy.errors import HistoryTooShort, InvalidParameter
from src.occupancy.flow import (
    FlowEstimate,
    FlowParams,
    Homography,
    compose,
    estimate_flow,
    grid_points,
)
from src.occupancy.grid import OccGrid, OccSequence

logger = logging.getLogger(__name__)


class WarpMode(str, Enum):
    BACKWARD_NN = "backward_nn"
    FORWARD_SPLAT = "forward_splat"


class Strategy(str, Enum):
    """How frame ``k`` is produced from the last real frame."""

    COMPOSED = "composed"  # warp the last frame once with M^k
    ITERATED = "iterated"  # warp the previous prediction with M


class ForecastParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    horizon: int = Field(default=4, ge=1)
    warp: WarpMode = WarpMode.BACKWARD_NN
    strategy: Strategy = Strategy.COMPOSED
    flow: FlowParams = Field(default_factory=FlowParams)


def _nearest(values: np.ndarray) -> np.ndarray:
    # half-integers round up so the result does not depend on parity
    return np.floor(values + 0.5).astype(np.int64)


def _backward_nn(grid: OccGrid, h: Homography) -> np.ndarray:
    width, height = grid.dims_x, grid.dims_y
    targets = grid_points(width, height)
    sources = _nearest(h.inverse().apply(targets))
    valid = (
        (sources[:, 0] >= 0)
        & (sources[:, 0] < width)
        & (sources[:, 1] >= 0)
        & (sources[:, 1] < height)
    )
    tx = targets[valid, 0].astype(np.int64)
    ty = targets[valid, 1].astype(np.int64)
    out = np.zeros(grid.dims, dtype=np.uint8)
    out[tx, ty] = grid.labels[sources[valid, 0], sources[valid, 1]]
    return out


def _forward_splat(grid: OccGrid, h: Homography) -> np.ndarray:
    width, height = grid.dims_x, grid.dims_y
    counts = grid.occupied().sum(axis=2)
    sx, sy = np.nonzero(counts)
    out = _backward_nn(grid, h)
    if sx.size == 0:
        return out

    dst = _nearest(h.apply(np.c_[sx, sy].astype(np.float64)))
    valid = (
        (dst[:, 0] >= 0)
        & (dst[:, 0] < width)
        & (dst[:, 1] >= 0)
        & (dst[:, 1] < height)
    )
    sx, sy, dst = sx[valid], sy[valid], dst[valid]
    if sx.size == 0:
        return out

    # most occupied voxels first, then smaller source x, then smaller y
    order = np.lexsort((sy, sx, -counts[sx, sy]))
    target_ids = dst[order, 0] * height + dst[order, 1]
    _, first = np.unique(target_ids, return_index=True)
    winners = order[first]
    tx, ty = dst[winners, 0], dst[winners, 1]
    out[tx, ty] = grid.labels[sx[winners], sy[winners]]
    return out


def warp_grid(
    grid: OccGrid, h: Homography, mode: WarpMode = WarpMode.BACKWARD_NN
) -> OccGrid:
    """Relocate columns of ``grid`` along the flow ``h``.

    ``backward_nn`` pulls every target column from the nearest source
    ``pi(M^-1 [x, y, 1])``; sources outside the grid give empty columns.
    ``forward_splat`` pushes occupied columns to their rounded targets; a
    collision keeps the column with more occupied voxels, then the smaller
    source ``(x, y)``. Targets nobody writes keep the backward result.
    """
    mode = WarpMode(mode)
    if h.is_identity():
        return grid
    if mode is WarpMode.BACKWARD_NN:
        labels = _backward_nn(grid, h)
    else:
        labels = _forward_splat(grid, h)
    return grid.with_labels(labels)


def copy_paste(history: OccSequence, horizon: int) -> OccSequence:
    """``horizon`` copies of the last observed frame."""
    if horizon < 1:
        raise InvalidParameter(f"horizon must be >= 1, got {horizon}")
    last = history.last
    return OccSequence(
        frames=tuple(last for _ in range(horizon)),
        frame_period_s=history.frame_period_s,
    )


def estimate_history_flow(
    history: OccSequence, p: FlowParams, threads: int = 1
) -> FlowEstimate:
    """Flow between the BEV maps of the last two history frames."""
    if len(history) < 2:
        raise HistoryTooShort(
            f"flow needs at least 2 history frames, got {len(history)}"
        )
    b0 = project_height(history[len(history) - 2])
    b1 = project_height(history[len(history) - 1])
    return estimate_flow(b0, b1, p, threads=threads)


def forecast(
    history: OccSequence,
    p: Optional[ForecastParams] = None,
    estimate: Optional[FlowEstimate] = None,
    threads: int = 1,
) -> OccSequence:
    """Predict ``p.horizon`` frames under constant velocity.

    When ``estimate`` is given it is used instead of re-estimating the flow.
    A flow estimate that fell back to the identity yields Copy&Paste.
    """
    p = p or ForecastParams()
    if len(history) < 2:
        raise HistoryTooShort(
            f"forecast needs at least 2 history frames, got {len(history)}"
        )
    if estimate is None:
        estimate = estimate_history_flow(history, p.flow, threads=threads)
    if estimate.fallback is not None:
        logger.warning(
            "no usable flow (%s); forecasting with Copy&Paste",
            estimate.fallback,
        )
        return copy_paste(history, p.horizon)

    m = estimate.homography
    last = history.last
    frames: List[OccGrid] = []
    previous = last
    for k in range(1, p.horizon + 1):
        if p.strategy is Strategy.COMPOSED:
            frame = warp_grid(last, compose(m, k), p.warp)
        else:
            frame = warp_grid(previous, m, p.warp)
        frames.append(frame)
        previous = frame
    logger.info(
        "forecast %d frames (%s, %s)",
        p.horizon,
        p.strategy.value,
        p.warp.value,
    )
    return OccSequence(
        frames=tuple(frames), frame_period_s=history.frame_period_s
    )
