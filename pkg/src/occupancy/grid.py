"""
Semantic occupancy grid data model and bit-exact sequence I/O.

Grids are dense ``(dims_x, dims_y, dims_z)`` arrays of unsigned 8-bit class
ids stored in C order, so the linear index of voxel ``(x, y, z)`` is
``((x * dims_y) + y) * dims_z + z`` and every BEV column is contiguous.

Binary formats (little-endian):

- OCCV (single grid): ``"OCCV"``, u16 version=1, u8 label_bits=8,
  u8 reserved=0, u32 dims_x, u32 dims_y, u32 dims_z, f32 voxel_size_m,
  followed by the label bytes.
- OCCS (sequence): ``"OCCS"``, u16 version=1, u16 reserved, u32
  frame_count, f32 frame_period_s, followed by frame_count OCCV blocks.

Class names, origin and frame period may also be stored in a YAML sidecar
next to the binary file (``<path>.meta.yaml``).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from src.occupancy.errors import (
    BadMagic,
    DimsOverflow,
    EmptySequence,
    FrameDimMismatch,
    InvalidDims,
    IoFailure,
    LabelOutOfRange,
    SizeMismatch,
    TrailingBytes,
    TruncatedFile,
    UnsupportedVersion,
)

logger = logging.getLogger(__name__)

FREE_LABEL = 0
DEFAULT_NUM_CLASSES = 18
DEFAULT_VOXEL_SIZE_M = 0.4
DEFAULT_ORIGIN_M = (-40.0, -40.0, -1.0)
DEFAULT_DIMS = (200, 200, 16)
DEFAULT_FRAME_PERIOD_S = 0.5

OCCV_MAGIC = b"OCCV"
OCCS_MAGIC = b"OCCS"
FORMAT_VERSION = 1
LABEL_BITS = 8
MAX_VOXELS = 2**32

# magic, version, label_bits, reserved, dims_x, dims_y, dims_z, voxel_size
_OCCV_HEADER = struct.Struct("<4sHBBIIIf")
# magic, version, reserved, frame_count, frame_period_s
_OCCS_HEADER = struct.Struct("<4sHHIf")

SIDECAR_SUFFIX = ".meta.yaml"

OCC3D_CLASS_NAMES = (
    "free",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "general_object",
)


def _as_f32(value: float) -> float:
    """Round a real to the nearest float32 so it survives serialization."""
    return float(np.float32(value))


@dataclass(frozen=True)
class ClassTable:
    """Class names indexed by id, with per-class mIoU participation."""

    names: Tuple[str, ...]
    evaluable: Tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(
            self, "evaluable", tuple(bool(e) for e in self.evaluable)
        )
        if not self.names:
            raise InvalidDims("class table must name at least one class")
        if len(self.names) != len(self.evaluable):
            raise InvalidDims(
                f"class table has {len(self.names)} names but "
                f"{len(self.evaluable)} evaluable flags"
            )
        if len(self.names) > 256:
            raise InvalidDims("8-bit labels allow at most 256 classes")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def free_id(self) -> int:
        return FREE_LABEL

    def evaluable_ids(self) -> List[int]:
        return [i for i, e in enumerate(self.evaluable) if e]

    @classmethod
    def occ3d(cls, include_general_object: bool = False) -> "ClassTable":
        """Free + 16 named categories + general object (GO).

        The sixteen named categories are evaluable; GO joins the mIoU only
        when ``include_general_object`` is set.
        """
        evaluable = [False] + [True] * 16 + [include_general_object]
        return cls(names=OCC3D_CLASS_NAMES, evaluable=tuple(evaluable))

    @classmethod
    def generic(cls, num_classes: int) -> "ClassTable":
        """Unnamed table with every non-free class evaluable."""
        names = ["free"] + [f"class_{i}" for i in range(1, num_classes)]
        evaluable = [False] + [True] * (num_classes - 1)
        return cls(names=tuple(names), evaluable=tuple(evaluable))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class_names": list(self.names),
            "evaluable": list(self.evaluable),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClassTable":
        names = data["class_names"]
        evaluable = data.get(
            "evaluable", [False] + [True] * (len(names) - 1)
        )
        return cls(names=tuple(names), evaluable=tuple(evaluable))


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and int(labels.max()) >= num_classes:
        x, y, z = (int(v) for v in np.argwhere(labels >= num_classes)[0])
        raise LabelOutOfRange(x, y, z, int(labels[x, y, z]), num_classes)


def _check_dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    if len(dims) != 3:
        raise InvalidDims(f"expected 3 dims, got {len(dims)}")
    dx, dy, dz = (int(d) for d in dims)
    if min(dx, dy, dz) < 1:
        raise InvalidDims(f"dims must be positive, got {(dx, dy, dz)}")
    if dx * dy * dz > MAX_VOXELS:
        raise DimsOverflow(
            f"dims {(dx, dy, dz)} exceed {MAX_VOXELS} voxels",
            {"dims": [dx, dy, dz]},
        )
    return dx, dy, dz


@dataclass(frozen=True, eq=False)
class OccGrid:
    """Dense 3D semantic occupancy grid, immutable after construction."""

    labels: np.ndarray
    voxel_size_m: float = DEFAULT_VOXEL_SIZE_M
    origin_m: Tuple[float, float, float] = DEFAULT_ORIGIN_M
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise InvalidDims(f"labels must be 3D, got {labels.ndim}D")
        _check_dims(labels.shape)
        if labels.dtype != np.uint8:
            if labels.size and (
                int(labels.min()) < 0 or int(labels.max()) > 255
            ):
                bad = np.argwhere((labels < 0) | (labels > 255))[0]
                x, y, z = (int(v) for v in bad)
                raise LabelOutOfRange(
                    x, y, z, int(labels[x, y, z]), self.num_classes
                )
        labels = np.array(labels, dtype=np.uint8, order="C", copy=True)
        if not 1 <= int(self.num_classes) <= 256:
            raise InvalidDims(f"num_classes {self.num_classes} not in 1..256")
        _check_labels(labels, int(self.num_classes))
        labels.setflags(write=False)

        voxel_size = _as_f32(self.voxel_size_m)
        if not np.isfinite(voxel_size) or voxel_size <= 0:
            raise InvalidDims(f"voxel size must be positive, got {voxel_size}")
        origin = tuple(float(v) for v in self.origin_m)
        if len(origin) != 3:
            raise InvalidDims("origin must be a 3-vector")

        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "voxel_size_m", voxel_size)
        object.__setattr__(self, "origin_m", origin)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @classmethod
    def empty(
        cls,
        dims: Sequence[int] = DEFAULT_DIMS,
        voxel_size_m: float = DEFAULT_VOXEL_SIZE_M,
        origin_m: Tuple[float, float, float] = DEFAULT_ORIGIN_M,
        num_classes: int = DEFAULT_NUM_CLASSES,
    ) -> "OccGrid":
        shape = _check_dims(dims)
        return cls(
            labels=np.zeros(shape, dtype=np.uint8),
            voxel_size_m=voxel_size_m,
            origin_m=origin_m,
            num_classes=num_classes,
        )

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def dims_x(self) -> int:
        return self.dims[0]

    @property
    def dims_y(self) -> int:
        return self.dims[1]

    @property
    def dims_z(self) -> int:
        return self.dims[2]

    @property
    def flat(self) -> np.ndarray:
        """Labels in linear-index order."""
        return self.labels.reshape(-1)

    def occupied(self) -> np.ndarray:
        return self.labels != FREE_LABEL

    def with_labels(self, labels: np.ndarray) -> "OccGrid":
        """New grid with the same metadata and different labels."""
        return OccGrid(
            labels=labels,
            voxel_size_m=self.voxel_size_m,
            origin_m=self.origin_m,
            num_classes=self.num_classes,
        )

    def with_origin(self, origin_m: Tuple[float, float, float]) -> "OccGrid":
        return OccGrid(
            labels=self.labels,
            voxel_size_m=self.voxel_size_m,
            origin_m=origin_m,
            num_classes=self.num_classes,
        )

    def same_layout(self, other: "OccGrid") -> bool:
        return (
            self.dims == other.dims
            and self.voxel_size_m == other.voxel_size_m
            and self.origin_m == other.origin_m
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OccGrid):
            return NotImplemented
        return (
            self.same_layout(other)
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return (
            f"OccGrid(dims={self.dims}, voxel_size_m={self.voxel_size_m}, "
            f"occupied={int(self.occupied().sum())})"
        )


@dataclass(frozen=True, eq=False)
class OccSequence:
    """Ordered frames sharing one layout."""

    frames: Tuple[OccGrid, ...]
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise EmptySequence("sequence must contain at least one frame")
        first = frames[0]
        for i, frame in enumerate(frames[1:], start=1):
            if frame.dims != first.dims:
                raise FrameDimMismatch(
                    f"frame {i} has dims {frame.dims}, expected {first.dims}",
                    {"frame": i},
                )
            if not frame.same_layout(first):
                raise FrameDimMismatch(
                    f"frame {i} metadata differs from frame 0", {"frame": i}
                )
        period = _as_f32(self.frame_period_s)
        if not np.isfinite(period) or period <= 0:
            raise InvalidDims(f"frame period must be positive, got {period}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_period_s", period)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[OccGrid]:
        return iter(self.frames)

    def __getitem__(self, index: int) -> OccGrid:
        return self.frames[index]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.frames[0].dims

    @property
    def last(self) -> OccGrid:
        return self.frames[-1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OccSequence):
            return NotImplemented
        return (
            self.frame_period_s == other.frame_period_s
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )

    __hash__ = None


# Binary encoding


def encode_grid(grid: OccGrid) -> bytes:
    header = _OCCV_HEADER.pack(
        OCCV_MAGIC,
        FORMAT_VERSION,
        LABEL_BITS,
        0,
        grid.dims_x,
        grid.dims_y,
        grid.dims_z,
        grid.voxel_size_m,
    )
    return header + grid.labels.tobytes(order="C")


def decode_grid(
    data: bytes,
    offset: int = 0,
    num_classes: int = DEFAULT_NUM_CLASSES,
    origin_m: Tuple[float, float, float] = DEFAULT_ORIGIN_M,
) -> Tuple[OccGrid, int]:
    """Decode one OCCV block starting at ``offset``.

    Returns the grid and the offset just past its payload.
    """
    view = memoryview(data)
    if len(view) - offset < len(OCCV_MAGIC):
        raise TruncatedFile("file ends before OCCV magic")
    if bytes(view[offset : offset + 4]) != OCCV_MAGIC:
        raise BadMagic(
            f"expected {OCCV_MAGIC!r} at byte {offset}, "
            f"got {bytes(view[offset:offset + 4])!r}"
        )
    if len(view) - offset < _OCCV_HEADER.size:
        raise TruncatedFile("file ends inside the OCCV header")
    _, version, label_bits, _, dx, dy, dz, voxel_size = (
        _OCCV_HEADER.unpack_from(view, offset)
    )
    if version != FORMAT_VERSION or label_bits != LABEL_BITS:
        raise UnsupportedVersion(
            f"OCCV version {version} with {label_bits}-bit labels "
            "is not supported"
        )
    dx, dy, dz = _check_dims((dx, dy, dz))
    start = offset + _OCCV_HEADER.size
    count = dx * dy * dz
    if len(view) - start < count:
        raise TruncatedFile(
            f"payload has {len(view) - start} bytes, expected {count}"
        )
    labels = np.frombuffer(view, dtype=np.uint8, count=count, offset=start)
    grid = OccGrid(
        labels=labels.reshape(dx, dy, dz),
        voxel_size_m=voxel_size,
        origin_m=origin_m,
        num_classes=num_classes,
    )
    return grid, start + count


def _read_bytes(path: Path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


# Sidecar metadata


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_sidecar(
    path: str | Path,
    class_table: Optional[ClassTable] = None,
    origin_m: Optional[Tuple[float, float, float]] = None,
    frame_period_s: Optional[float] = None,
) -> Path:
    """Write the YAML key/value sidecar for a binary file."""
    data: Dict[str, Any] = {}
    if class_table is not None:
        data.update(class_table.to_dict())
    if origin_m is not None:
        data["origin_m"] = [float(v) for v in origin_m]
    if frame_period_s is not None:
        data["frame_period_s"] = float(frame_period_s)
    target = sidecar_path(path)
    text = yaml.safe_dump(data, sort_keys=True, default_flow_style=None)
    _write_bytes(target, text.encode("utf-8"))
    return target


def load_sidecar(path: str | Path) -> Optional[Dict[str, Any]]:
    """Return sidecar contents, or None when there is no sidecar."""
    target = sidecar_path(path)
    if not target.exists():
        return None
    try:
        with open(target, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as e:
        raise IoFailure(f"cannot read sidecar {target}: {e}") from e
    if not isinstance(data, dict):
        raise IoFailure(f"sidecar {target} is not a key/value mapping")
    return data


def _sidecar_layout(
    path: Path, num_classes: Optional[int]
) -> Tuple[int, Tuple[float, float, float], Optional[float]]:
    meta = load_sidecar(path) or {}
    if num_classes is None:
        names = meta.get("class_names")
        num_classes = len(names) if names else DEFAULT_NUM_CLASSES
    origin = tuple(meta.get("origin_m", DEFAULT_ORIGIN_M))
    return num_classes, origin, meta.get("frame_period_s")


def _save_layout_sidecar(path: Path, grid: OccGrid) -> None:
    """Persist what the OCCV header cannot hold.

    Written when the class count or origin differ from the defaults, and
    refreshed whenever a sidecar already sits next to ``path`` so a stale
    one never contradicts the new payload. Existing class names are kept
    when their count still matches.
    """
    existing = load_sidecar(path)
    custom = (
        grid.num_classes != DEFAULT_NUM_CLASSES
        or grid.origin_m != DEFAULT_ORIGIN_M
    )
    if existing is None and not custom:
        return
    table = ClassTable.generic(grid.num_classes)
    names = (existing or {}).get("class_names")
    if names and len(names) == grid.num_classes:
        table = ClassTable.from_dict(existing)
    elif grid.num_classes == DEFAULT_NUM_CLASSES:
        table = ClassTable.occ3d()
    save_sidecar(
        path,
        class_table=table,
        origin_m=grid.origin_m,
        frame_period_s=(existing or {}).get("frame_period_s"),
    )


# Single grids


def load_grid(
    path: str | Path, num_classes: Optional[int] = None
) -> OccGrid:
    """Load and validate an OCCV file.

    ``num_classes`` defaults to the sidecar's class table when one exists,
    otherwise to 18.
    """
    path = Path(path)
    data = _read_bytes(path)
    num_classes, origin, _ = _sidecar_layout(path, num_classes)
    grid, end = decode_grid(data, num_classes=num_classes, origin_m=origin)
    if end != len(data):
        raise TrailingBytes(
            f"{len(data) - end} unexpected bytes after the OCCV payload"
        )
    return grid


def save_grid(grid: OccGrid, path: str | Path) -> None:
    path = Path(path)
    _write_bytes(path, encode_grid(grid))
    _save_layout_sidecar(path, grid)
    logger.debug("wrote grid %s to %s", grid.dims, path)


def import_raw(
    path: str | Path,
    dims: Sequence[int],
    num_classes: int = DEFAULT_NUM_CLASSES,
    voxel_size_m: float = DEFAULT_VOXEL_SIZE_M,
) -> OccGrid:
    """Import a headerless label dump already in x-major, z-fastest order."""
    dx, dy, dz = _check_dims(dims)
    data = _read_bytes(Path(path))
    expected = dx * dy * dz
    if len(data) != expected:
        raise SizeMismatch(
            f"raw file has {len(data)} bytes, dims {(dx, dy, dz)} "
            f"need {expected}",
            {"actual": len(data), "expected": expected},
        )
    labels = np.frombuffer(data, dtype=np.uint8).reshape(dx, dy, dz)
    return OccGrid(
        labels=labels, voxel_size_m=voxel_size_m, num_classes=num_classes
    )


def export_raw(grid: OccGrid, path: str | Path) -> None:
    _write_bytes(Path(path), grid.labels.tobytes(order="C"))


# Sequences


def encode_sequence(seq: OccSequence) -> bytes:
    header = _OCCS_HEADER.pack(
        OCCS_MAGIC, FORMAT_VERSION, 0, len(seq), seq.frame_period_s
    )
    return header + b"".join(encode_grid(frame) for frame in seq)


def decode_sequence(
    data: bytes,
    num_classes: int = DEFAULT_NUM_CLASSES,
    origin_m: Tuple[float, float, float] = DEFAULT_ORIGIN_M,
) -> OccSequence:
    if len(data) < len(OCCS_MAGIC):
        raise TruncatedFile("file ends before OCCS magic")
    if data[:4] != OCCS_MAGIC:
        raise BadMagic(f"expected {OCCS_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _OCCS_HEADER.size:
        raise TruncatedFile("file ends inside the OCCS header")
    _, version, _, frame_count, period = _OCCS_HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"OCCS version {version} is not supported")
    if frame_count == 0:
        raise EmptySequence("OCCS container declares zero frames")
    frames: List[OccGrid] = []
    offset = _OCCS_HEADER.size
    for _ in range(frame_count):
        grid, offset = decode_grid(
            data, offset, num_classes=num_classes, origin_m=origin_m
        )
        frames.append(grid)
    if offset != len(data):
        raise TrailingBytes(
            f"{len(data) - offset} unexpected bytes after the last frame"
        )
    return OccSequence(frames=tuple(frames), frame_period_s=period)


def load_sequence(
    path: str | Path, num_classes: Optional[int] = None
) -> OccSequence:
    """Load an OCCS container, or a directory of ``*.occv`` frames.

    Directory frames are ordered by file name; the frame period comes from
    the directory's sidecar when present.
    """
    path = Path(path)
    num_classes, origin, period = _sidecar_layout(path, num_classes)
    if path.is_dir():
        files = sorted(path.glob("*.occv"))
        if not files:
            raise EmptySequence(f"no .occv frames in {path}")
        frames = tuple(
            load_grid(f, num_classes=num_classes).with_origin(origin)
            for f in files
        )
        return OccSequence(
            frames=frames,
            frame_period_s=(
                period if period is not None else DEFAULT_FRAME_PERIOD_S
            ),
        )
    return decode_sequence(
        _read_bytes(path), num_classes=num_classes, origin_m=origin
    )


def save_sequence(seq: OccSequence, path: str | Path) -> None:
    path = Path(path)
    _write_bytes(path, encode_sequence(seq))
    _save_layout_sidecar(path, seq.last)
    logger.debug("wrote %d frames to %s", len(seq), path)


def save_sequence_dir(seq: OccSequence, directory: str | Path) -> List[Path]:
    """Write each frame as ``frame_0000.occv`` and a sequence sidecar."""
    directory = Path(directory)
    paths = []
    for i, frame in enumerate(seq):
        target = directory / f"frame_{i:04d}.occv"
        save_grid(frame, target)
        paths.append(target)
    num_classes = seq.last.num_classes
    save_sidecar(
        directory,
        class_table=(
            ClassTable.occ3d()
            if num_classes == DEFAULT_NUM_CLASSES
            else ClassTable.generic(num_classes)
        ),
        origin_m=seq.frames[0].origin_m,
        frame_period_s=seq.frame_period_s,
    )
    return paths


@dataclass
class GridSummary:
    """Lightweight description used by the runner's ``convert`` output."""

    dims: Tuple[int, int, int]
    occupied: int
    histogram: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def of(cls, grid: OccGrid) -> "GridSummary":
        counts = np.bincount(grid.flat, minlength=grid.num_classes)
        return cls(
            dims=grid.dims,
            occupied=int(grid.occupied().sum()),
            histogram={i: int(c) for i, c in enumerate(counts) if c},
        )
