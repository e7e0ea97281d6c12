"""
Bird's-eye-view projection of occupancy grids.

The height map stores, for every ``(x, y)`` column, the highest occupied
``z`` index, or ``EMPTY_HEIGHT`` (-1) when the column holds no occupied
voxel. The label map stores the class of that topmost voxel (0 when
empty).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.occupancy.errors import IndexOutOfRange, InvalidDims, IoFailure
from src.occupancy.grid import FREE_LABEL, OccGrid

logger = logging.getLogger(__name__)

EMPTY_HEIGHT = -1


@dataclass(frozen=True, eq=False)
class BevMap:
    """Height map ``g(x, y)`` of one grid; ``depth`` is the grid's dims_z."""

    heights: np.ndarray
    depth: int

    def __post_init__(self):
        heights = np.array(self.heights, dtype=np.int32, copy=True)
        if heights.ndim != 2:
            raise InvalidDims("height map must be 2D")
        occupied = heights != EMPTY_HEIGHT
        if occupied.any() and (
            heights[occupied].min() < 0
            or heights[occupied].max() >= self.depth
        ):
            raise InvalidDims(
                f"heights must be -1 or in [0, {self.depth})"
            )
        heights.setflags(write=False)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "depth", int(self.depth))

    @property
    def width(self) -> int:
        return int(self.heights.shape[0])

    @property
    def height(self) -> int:
        return int(self.heights.shape[1])

    def nonempty(self) -> np.ndarray:
        return self.heights != EMPTY_HEIGHT

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BevMap):
            return NotImplemented
        return self.depth == other.depth and np.array_equal(
            self.heights, other.heights
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BevLabelMap:
    """Class of the topmost occupied voxel per column."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8, copy=True)
        if labels.ndim != 2:
            raise InvalidDims("label map must be 2D")
        if labels.size and int(labels.max()) >= self.num_classes:
            raise InvalidDims(
                f"BEV labels must be < {self.num_classes}"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return int(self.labels.shape[0])

    @property
    def height(self) -> int:
        return int(self.labels.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BevLabelMap):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    __hash__ = None


def _top_indices(grid: OccGrid) -> Tuple[np.ndarray, np.ndarray]:
    occupied = grid.occupied()
    nonempty = occupied.any(axis=2)
    # argmax over the reversed z axis finds the last occupied index
    top = grid.dims_z - 1 - np.argmax(occupied[:, :, ::-1], axis=2)
    return np.where(nonempty, top, EMPTY_HEIGHT), nonempty


def project_height(grid: OccGrid) -> BevMap:
    """Max occupied z per column, -1 for empty columns."""
    heights, _ = _top_indices(grid)
    return BevMap(heights=heights, depth=grid.dims_z)


def project_label(grid: OccGrid) -> BevLabelMap:
    """Label of the topmost occupied voxel per column, 0 when empty."""
    heights, nonempty = _top_indices(grid)
    safe = np.where(nonempty, heights, 0)[:, :, None]
    top_labels = np.take_along_axis(grid.labels, safe, axis=2)[:, :, 0]
    labels = np.where(nonempty, top_labels, FREE_LABEL)
    return BevLabelMap(labels=labels, num_classes=grid.num_classes)


def column(grid: OccGrid, x: int, y: int) -> List[Tuple[int, int]]:
    """Occupied ``(z, label)`` pairs of one column, ascending z."""
    if not (0 <= x < grid.dims_x and 0 <= y < grid.dims_y):
        raise IndexOutOfRange(
            f"column ({x},{y}) outside {grid.dims_x}x{grid.dims_y}",
            {"x": x, "y": y},
        )
    col = grid.labels[x, y]
    return [(int(z), int(col[z])) for z in np.flatnonzero(col)]


def grid_from_columns(
    columns: Dict[Tuple[int, int], Sequence[Tuple[int, int]]],
    template: OccGrid,
) -> OccGrid:
    """Reassemble a grid from ``column`` output, keyed by ``(x, y)``."""
    labels = np.zeros(template.dims, dtype=np.uint8)
    for (x, y), entries in columns.items():
        for z, label in entries:
            labels[x, y, z] = label
    return template.with_labels(labels)


def save_height_pgm(bev: BevMap, path: str | Path) -> None:
    """Write the height map as a 16-bit binary PGM.

    Pixel value is ``height + 1``, so 0 marks an empty column. Rows of the
    image are ``y`` and columns are ``x``.
    """
    pixels = (bev.heights.T.astype(np.int64) + 1).astype(">u2")
    header = (
        "P5\n"
        "# occupancy BEV height map: value = max occupied z + 1, "
        "0 = empty column\n"
        f"{bev.width} {bev.height}\n65535\n"
    ).encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pixels.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def save_label_csv(labels: BevLabelMap, path: str | Path) -> None:
    """Write the label map as CSV, one row per ``y``, one column per ``x``."""
    try:
        np.savetxt(path, labels.labels.T, fmt="%d", delimiter=",")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
