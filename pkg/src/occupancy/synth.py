"""
Deterministic synthetic traffic scenes with known motion.

Coordinates are grid cells. World coordinates coincide with the grid of
frame 0; ``ego_motion`` is the apparent per-frame rigid motion of the whole
world in grid coordinates (rotation by ``yaw_deg`` about the grid center,
then translation by ``(dx, dy)``), so it is also the ground-truth homography
between consecutive frames. Objects move in world coordinates on top of
that.

Texture comes from a seeded integer hash: ground heights are 0..2 hashed on
rounded world coordinates, object heights jitter by one cell hashed on
object-local cells, so integer motions reproduce texture exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.occupancy.errors import InvalidScenario, IoFailure, UnknownPreset
from src.occupancy.flow import Homography
from src.occupancy.grid import (
    DEFAULT_FRAME_PERIOD_S,
    DEFAULT_NUM_CLASSES,
    OccGrid,
    OccSequence,
)

logger = logging.getLogger(__name__)

SYNTH_DIMS = (64, 64, 8)
DEFAULT_SEED = 42

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GROUND_SALT = 0x67726F756E64
_OBJECT_SALT = 0x6F626A656374


class ObjectSpec(BaseModel):
    """A box: class, extents ``(ex, ey, ez)`` in cells, start pose of its
    footprint center, per-frame velocity and yaw rate."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "object"
    class_id: int
    extents: Tuple[int, int, int]
    center: Tuple[float, float]
    yaw_deg: float = 0.0
    velocity: Tuple[float, float] = (0.0, 0.0)
    yaw_rate_deg: float = 0.0
    jitter: bool = True


class EgoMotion(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dx: float = 0.0
    dy: float = 0.0
    yaw_deg: float = 0.0


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "custom"
    dims: Tuple[int, int, int] = SYNTH_DIMS
    num_classes: int = DEFAULT_NUM_CLASSES
    ground_class: int = 11
    objects: Tuple[ObjectSpec, ...] = ()
    ego_motion: EgoMotion = Field(default_factory=EgoMotion)
    frames: int = 8
    seed: int = DEFAULT_SEED
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scenario":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise InvalidScenario(f"malformed scenario: {e}") from e

    def with_seed(self, seed: int) -> "Scenario":
        return self.model_copy(update={"seed": int(seed)})

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.dims[0] - 1) / 2.0, (self.dims[1] - 1) / 2.0)


@dataclass(frozen=True)
class ObjectPose:
    """Apparent pose of an object's footprint center in grid coordinates."""

    frame: int
    x: float
    y: float
    yaw_deg: float


@dataclass(frozen=True)
class ClipRecord:
    object: str
    frame: int
    reason: str


@dataclass
class GroundTruthMotion:
    """Ground (ego) homography per frame pair, object poses and clipping."""

    homographies: List[Homography]
    object_poses: Dict[str, List[ObjectPose]] = field(default_factory=dict)
    clipping: List[ClipRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "homographies": [h.as_rows() for h in self.homographies],
            "objects": {
                name: [
                    {
                        "frame": p.frame,
                        "x": float(p.x),
                        "y": float(p.y),
                        "yaw_deg": float(p.yaw_deg),
                    }
                    for p in poses
                ]
                for name, poses in self.object_poses.items()
            },
            "clipping": [
                {"object": c.object, "frame": c.frame, "reason": c.reason}
                for c in self.clipping
            ],
        }


def _mix(v: np.ndarray) -> np.ndarray:
    v = v + _GOLDEN
    v = (v ^ (v >> np.uint64(30))) * _MIX1
    v = (v ^ (v >> np.uint64(27))) * _MIX2
    return v ^ (v >> np.uint64(31))


def _hash(a: np.ndarray, b: np.ndarray, seed: int, salt: int) -> np.ndarray:
    """Stable 64-bit hash of integer coordinate pairs."""
    base = _mix(np.array([seed ^ salt], dtype=np.uint64))
    h = _mix(base ^ np.asarray(a, dtype=np.int64).astype(np.uint64))
    return _mix(h ^ np.asarray(b, dtype=np.int64).astype(np.uint64))


def _nearest(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def _rotate(x: np.ndarray, y: np.ndarray, deg: float):
    if deg == 0.0:
        return x, y
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return c * x - s * y, s * x + c * y


def _ego_pose(sc: Scenario, t: int) -> Tuple[float, np.ndarray]:
    """Angle and translation of ``E^t`` written as ``R(a)(p - c) + c + T``."""
    e = sc.ego_motion
    offset = np.zeros(2)
    for i in range(t):
        rx, ry = _rotate(np.array(e.dx), np.array(e.dy), i * e.yaw_deg)
        offset = offset + np.array([float(rx), float(ry)])
    return t * e.yaw_deg, offset


def _grid_to_world(sc: Scenario, t: int, x: np.ndarray, y: np.ndarray):
    angle, offset = _ego_pose(sc, t)
    cx, cy = sc.center
    wx, wy = _rotate(x - cx - offset[0], y - cy - offset[1], -angle)
    return wx + cx, wy + cy


def _world_to_grid(sc: Scenario, t: int, x: np.ndarray, y: np.ndarray):
    angle, offset = _ego_pose(sc, t)
    cx, cy = sc.center
    gx, gy = _rotate(x - cx, y - cy, angle)
    return gx + cx + offset[0], gy + cy + offset[1]


def ground_truth_homography(sc: Scenario) -> Homography:
    e = sc.ego_motion
    if e.yaw_deg == 0.0:
        return Homography.translation(e.dx, e.dy)
    return Homography.similarity(e.yaw_deg, e.dx, e.dy, center=sc.center)


def validate_scenario(sc: Scenario) -> None:
    if len(sc.dims) != 3 or min(sc.dims) < 1:
        raise InvalidScenario(f"dims must be positive, got {sc.dims}")
    if not 1 <= sc.num_classes <= 256:
        raise InvalidScenario(f"num_classes {sc.num_classes} not in 1..256")
    if sc.frames < 1:
        raise InvalidScenario("a scenario needs at least one frame")
    if not 0 <= sc.ground_class < sc.num_classes:
        raise InvalidScenario(f"ground class {sc.ground_class} out of range")
    if sc.seed < 0 or sc.seed >= 2**64:
        raise InvalidScenario("seed must be a 64-bit unsigned integer")
    if sc.frame_period_s <= 0:
        raise InvalidScenario("frame period must be positive")
    names = set()
    for obj in sc.objects:
        if not 1 <= obj.class_id < sc.num_classes:
            raise InvalidScenario(
                f"object {obj.name!r} class {obj.class_id} must be in "
                f"[1, {sc.num_classes})"
            )
        if min(obj.extents) < 1:
            raise InvalidScenario(f"object {obj.name!r} extents must be >= 1")
        if obj.jitter and obj.extents[2] < 2:
            raise InvalidScenario(
                f"object {obj.name!r} needs height >= 2 for jitter"
            )
        if obj.name in names:
            raise InvalidScenario(f"duplicate object name {obj.name!r}")
        names.add(obj.name)


def _object_pose_world(obj: ObjectSpec, t: int) -> Tuple[float, float, float]:
    return (
        obj.center[0] + t * obj.velocity[0],
        obj.center[1] + t * obj.velocity[1],
        obj.yaw_deg + t * obj.yaw_rate_deg,
    )


def _render_frame(
    sc: Scenario, t: int, clipping: List[ClipRecord]
) -> np.ndarray:
    dx_, dy_, dz_ = sc.dims
    xs, ys = np.meshgrid(
        np.arange(dx_, dtype=np.float64),
        np.arange(dy_, dtype=np.float64),
        indexing="ij",
    )
    wx, wy = _grid_to_world(sc, t, xs, ys)
    zs = np.arange(dz_)
    labels = np.zeros(sc.dims, dtype=np.uint8)

    if sc.ground_class != 0:
        top = (_hash(_nearest(wx), _nearest(wy), sc.seed, _GROUND_SALT) % 3)
        top = np.minimum(top.astype(np.int64), dz_ - 1)
        labels[zs[None, None, :] <= top[:, :, None]] = sc.ground_class

    for k, obj in enumerate(sc.objects):
        ox, oy, oyaw = _object_pose_world(obj, t)
        ex, ey, ez = obj.extents
        lx, ly = _rotate(wx - ox, wy - oy, -oyaw)
        inside = (
            (lx >= -ex / 2.0)
            & (lx < ex / 2.0)
            & (ly >= -ey / 2.0)
            & (ly < ey / 2.0)
        )
        top = np.full(inside.shape, ez - 1, dtype=np.int64)
        if obj.jitter:
            ix = np.floor(lx + ex / 2.0).astype(np.int64)
            iy = np.floor(ly + ey / 2.0).astype(np.int64)
            j = _hash(ix, iy, sc.seed, _OBJECT_SALT + k) % 3
            top = top + j.astype(np.int64) - 1
        if int(top[inside].max(initial=-1)) > dz_ - 1:
            clipping.append(ClipRecord(obj.name, t, "height"))
        top = np.minimum(top, dz_ - 1)

        corners_x, corners_y = _rotate(
            np.array([-ex, ex, ex, -ex]) / 2.0,
            np.array([-ey, -ey, ey, ey]) / 2.0,
            oyaw,
        )
        gx, gy = _world_to_grid(sc, t, corners_x + ox, corners_y + oy)
        if (
            gx.min() < -0.5
            or gx.max() > dx_ - 0.5
            or gy.min() < -0.5
            or gy.max() > dy_ - 0.5
        ):
            clipping.append(ClipRecord(obj.name, t, "footprint"))

        column = zs[None, None, :] <= top[:, :, None]
        labels[inside] = 0
        labels[inside[:, :, None] & column] = obj.class_id
    return labels


def generate(sc: Scenario) -> Tuple[OccSequence, GroundTruthMotion]:
    """Render every frame of ``sc`` and its ground-truth motion."""
    validate_scenario(sc)
    clipping: List[ClipRecord] = []
    frames = [
        OccGrid(
            labels=_render_frame(sc, t, clipping),
            num_classes=sc.num_classes,
        )
        for t in range(sc.frames)
    ]
    h = ground_truth_homography(sc)
    poses: Dict[str, List[ObjectPose]] = {}
    for obj in sc.objects:
        track = []
        for t in range(sc.frames):
            ox, oy, oyaw = _object_pose_world(obj, t)
            gx, gy = _world_to_grid(sc, t, np.array(ox), np.array(oy))
            yaw = oyaw + t * sc.ego_motion.yaw_deg
            track.append(ObjectPose(t, float(gx), float(gy), yaw))
        poses[obj.name] = track
    for rec in clipping:
        logger.warning(
            "scenario %s: object %s clipped (%s) in frame %d",
            sc.name,
            rec.object,
            rec.reason,
            rec.frame,
        )
    motion = GroundTruthMotion(
        homographies=[h for _ in range(sc.frames - 1)],
        object_poses=poses,
        clipping=clipping,
    )
    seq = OccSequence(frames=tuple(frames), frame_period_s=sc.frame_period_s)
    return seq, motion


def split(seq: OccSequence, history: int) -> Tuple[OccSequence, OccSequence]:
    """First ``history`` frames and the remaining future frames."""
    if not 1 <= history < len(seq):
        raise InvalidScenario(
            f"history length {history} must be in [1, {len(seq)})"
        )
    return (
        OccSequence(seq.frames[:history], seq.frame_period_s),
        OccSequence(seq.frames[history:], seq.frame_period_s),
    )


def save_motion_yaml(motion: GroundTruthMotion, path: str | Path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(motion.to_dict(), f, sort_keys=True)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_motion_yaml(path: str | Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


# Presets (64x64x8, classes from the 18-class table: 4 car, 10 truck,
# 11 driveable surface)

CAR = 4
TRUCK = 10
ROAD = 11


def _static() -> Scenario:
    return Scenario(
        name="static",
        objects=(
            ObjectSpec(
                name="parked_car",
                class_id=CAR,
                extents=(10, 5, 3),
                center=(32.0, 32.0),
            ),
        ),
    )


def _translating_car() -> Scenario:
    # no ground, so the moving box is the dominant motion
    return Scenario(
        name="translating_car",
        ground_class=0,
        objects=(
            ObjectSpec(
                name="car",
                class_id=CAR,
                extents=(36, 24, 3),
                center=(24.0, 30.0),
                velocity=(2.0, 0.0),
            ),
        ),
    )


def _ego_translation() -> Scenario:
    return Scenario(
        name="ego_translation",
        ego_motion=EgoMotion(dx=-1.0, dy=0.0),
        objects=(
            ObjectSpec(
                name="parked_car",
                class_id=CAR,
                extents=(8, 4, 3),
                center=(40.0, 20.0),
            ),
        ),
    )


def _ego_rotation() -> Scenario:
    return Scenario(name="ego_rotation", ego_motion=EgoMotion(yaw_deg=2.0))


def _crossing_pair() -> Scenario:
    return Scenario(
        name="crossing_pair",
        objects=(
            ObjectSpec(
                name="car",
                class_id=CAR,
                extents=(8, 4, 3),
                center=(14.0, 24.0),
                velocity=(2.0, 0.0),
            ),
            ObjectSpec(
                name="truck",
                class_id=TRUCK,
                extents=(5, 10, 4),
                center=(40.0, 10.0),
                velocity=(0.0, 2.0),
            ),
        ),
    )


_PRESETS = {
    "static": _static,
    "translating_car": _translating_car,
    "ego_translation": _ego_translation,
    "ego_rotation": _ego_rotation,
    "crossing_pair": _crossing_pair,
}


def scenario_presets() -> Dict[str, Scenario]:
    return {name: build() for name, build in _PRESETS.items()}


def get_preset(name: str, seed: Optional[int] = None) -> Scenario:
    if name not in _PRESETS:
        raise UnknownPreset(
            f"unknown preset {name!r}; valid: {', '.join(_PRESETS)}"
        )
    sc = _PRESETS[name]()
    return sc if seed is None else sc.with_seed(seed)
