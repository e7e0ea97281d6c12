"""
Property suite behind ``occ_runner self-test``.

Each check exercises one pipeline invariant on the synthetic presets or on
seeded random inputs and compares the vectorized result with a plain-loop
oracle. Checks never raise: a typed pipeline error is reported as a failed
check.
"""

from __future__ import annotations

import logging
import time
from enum import Enum
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
)

import numpy as np
from pydantic import BaseModel

from src.occupancy.errors import OccupancyError
from src.occupancy.flow import (
    FlowParams,
    Homography,
    grid_points,
    normalized_dlt,
    transfer_error,
)
from src.occupancy.forecast import (
    ForecastParams,
    copy_paste,
    estimate_history_flow,
    forecast,
)
from src.occupancy.fusion import (
    lovasz_per_class,
    one_hot,
    quality_fuse,
)
from src.occupancy.grid import (
    OccGrid,
    OccSequence,
    decode_grid,
    decode_sequence,
    encode_grid,
    encode_sequence,
)
from src.occupancy.metrics import (
    bev_metrics,
    confusion,
    iou_occupancy,
    miou,
)
from src.occupancy.synth import generate, get_preset, split

logger = logging.getLogger(__name__)

TIME_BUDGET_S = 30.0
RANDOM_CASES = 100
HISTORY_FRAMES = 4
HORIZON = 4
# mean symmetric transfer error, in cells, for ego-motion recovery
RECOVERY_TOLERANCE = 0.1
ORACLE_TOLERANCE = 1e-12


class CheckStatus(str, Enum):
    """Status of an individual property check."""

    PASSED = "passed"
    FAILED = "failed"
    WARNING = "warning"


class SuiteStatus(str, Enum):
    """Overall self-test status."""

    PASSED = "passed"
    FAILED = "failed"
    WARNING = "warning"


class PropertyCheck(BaseModel):
    name: str
    status: CheckStatus
    message: str
    details: Optional[Dict[str, Any]] = None


class SelfTestResult(BaseModel):
    overall_status: SuiteStatus
    checks: List[PropertyCheck]
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return self.overall_status is not SuiteStatus.FAILED


def _check(name: str, ok: bool, message: str, **details) -> PropertyCheck:
    return PropertyCheck(
        name=name,
        status=CheckStatus.PASSED if ok else CheckStatus.FAILED,
        message=message,
        details=details or None,
    )


def _random_grid(rng: np.random.Generator, dims, num_classes: int) -> OccGrid:
    labels = rng.integers(0, num_classes, size=dims, dtype=np.uint8)
    return OccGrid(labels=labels, num_classes=num_classes)


# Plain-loop oracles


def _fuse_oracle(a: OccGrid, b: OccGrid, w: float) -> np.ndarray:
    c = max(a.num_classes, b.num_classes)
    counts = [0] * c
    for value in b.labels.reshape(-1):
        counts[int(value)] += 1
    ranked = sorted(range(c), key=lambda i: (counts[i], i))
    alpha = [0.0] * c
    for rank, cls in enumerate(ranked):
        alpha[cls] = (rank + 1) / c

    out = np.zeros(a.dims, dtype=np.uint8)
    dx, dy, dz = a.dims
    for x in range(dx):
        for y in range(dy):
            for z in range(dz):
                la, lb = int(a.labels[x, y, z]), int(b.labels[x, y, z])
                best, best_score = 0, None
                for cls in range(c):
                    score = (1.0 - w) * float(la == cls) + w * float(lb == cls)
                    score = score * alpha[cls]
                    if best_score is None or score > best_score:
                        best, best_score = cls, score
                out[x, y, z] = best
    return out


def _confusion_oracle(pred: np.ndarray, gt: np.ndarray, c: int) -> np.ndarray:
    counts = np.zeros((c, c), dtype=np.int64)
    for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
        counts[int(g), int(p)] += 1
    return counts


def _class_iou_oracle(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    p, g = set(), set()
    for idx, value in np.ndenumerate(pred):
        if value == cls:
            p.add(idx)
    for idx, value in np.ndenumerate(gt):
        if value == cls:
            g.add(idx)
    union = p | g
    return len(p & g) / len(union) if union else 0.0


def _top_label_oracle(labels: np.ndarray) -> np.ndarray:
    dx, dy, dz = labels.shape
    out = np.zeros((dx, dy), dtype=np.uint8)
    for x in range(dx):
        for y in range(dy):
            for z in range(dz - 1, -1, -1):
                if labels[x, y, z] != 0:
                    out[x, y] = labels[x, y, z]
                    break
    return out


def _miou_oracle(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    values = []
    for cls in range(1, c):
        if np.any(pred == cls) or np.any(gt == cls):
            values.append(_class_iou_oracle(pred, gt, cls))
    return float(np.mean(values)) if values else 1.0


def _shift_voxels(
    voxels: Set[Tuple[int, int, int]],
    shift: Tuple[int, int],
    dims: Tuple[int, int, int],
) -> Set[Tuple[int, int, int]]:
    """Voxels moved by whole cells, clipped to the grid."""
    out = set()
    for x, y, z in voxels:
        tx, ty = x + shift[0], y + shift[1]
        if 0 <= tx < dims[0] and 0 <= ty < dims[1]:
            out.add((tx, ty, z))
    return out


def _set_iou(a: Set, b: Set) -> float:
    union = len(a | b)
    return 1.0 if union == 0 else len(a & b) / union


def footprint_iou_oracle(
    body: OccGrid, poses: Sequence[Any], last: int, horizon: int
) -> Tuple[List[float], List[float]]:
    """Expected occupied IoU of the flow forecast and of Copy&Paste for a
    single rigid box moving by whole cells per frame.

    ``body`` is frame 0 and ``poses`` the box's per-frame footprint
    centers; frame ``t`` is frame 0 moved by ``poses[t] - poses[0]``.
    """

    def offset(t: int) -> Tuple[int, int]:
        return (
            int(round(poses[t].x - poses[0].x)),
            int(round(poses[t].y - poses[0].y)),
        )

    voxels = {tuple(v) for v in np.argwhere(body.labels != 0).tolist()}
    frozen = _shift_voxels(voxels, offset(last), body.dims)
    sx = offset(last)[0] - offset(last - 1)[0]
    sy = offset(last)[1] - offset(last - 1)[1]
    forecast_iou, copy_iou = [], []
    for k in range(1, horizon + 1):
        truth = _shift_voxels(voxels, offset(last + k), body.dims)
        predicted = _shift_voxels(frozen, (k * sx, k * sy), body.dims)
        forecast_iou.append(_set_iou(predicted, truth))
        copy_iou.append(_set_iou(frozen, truth))
    return forecast_iou, copy_iou


class PropertyChecker:
    """Runs every pipeline property and collects named results."""

    def __init__(self, threads: int = 1, seed: int = 42):
        self.threads = threads
        self.seed = seed

    def _checks(self) -> List[Callable[[], PropertyCheck]]:
        return [
            self.check_format_round_trip,
            self.check_dlt_exact,
            self.check_ego_translation_recovery,
            self.check_ego_rotation_recovery,
            self.check_static_fixed_point,
            self.check_dynamic_dominance,
            self.check_fusion_oracle,
            self.check_lovasz_vertex,
            self.check_metric_oracle,
            self.check_synth_determinism,
        ]

    def run_checks(self) -> SelfTestResult:
        start = time.perf_counter()
        checks: List[PropertyCheck] = []
        for fn in self._checks():
            name = fn.__name__.removeprefix("check_")
            try:
                result = fn()
            except OccupancyError as e:
                result = PropertyCheck(
                    name=name,
                    status=CheckStatus.FAILED,
                    message=e.one_line(),
                )
            logger.info("self-test %s: %s", result.name, result.status.value)
            checks.append(result)
        elapsed = time.perf_counter() - start

        if elapsed > TIME_BUDGET_S:
            checks.append(
                PropertyCheck(
                    name="time_budget",
                    status=CheckStatus.WARNING,
                    message=f"suite took {elapsed:.1f}s (> {TIME_BUDGET_S}s)",
                )
            )

        failed_checks = [c for c in checks if c.status == CheckStatus.FAILED]
        warning_checks = [c for c in checks if c.status == CheckStatus.WARNING]
        if failed_checks:
            overall_status = SuiteStatus.FAILED
        elif warning_checks:
            overall_status = SuiteStatus.WARNING
        else:
            overall_status = SuiteStatus.PASSED

        return SelfTestResult(
            overall_status=overall_status, checks=checks, elapsed_s=elapsed
        )

    # Formats

    def check_format_round_trip(self) -> PropertyCheck:
        rng = np.random.default_rng(self.seed)
        for _ in range(10):
            dims = tuple(int(v) for v in rng.integers(1, 9, size=3))
            grid = _random_grid(rng, dims, 18)
            data = encode_grid(grid)
            decoded, end = decode_grid(data)
            if end != len(data) or encode_grid(decoded) != data:
                return _check("format_round_trip", False, f"OCCV {dims}")
        seq = OccSequence(
            frames=tuple(_random_grid(rng, (4, 3, 2), 18) for _ in range(3))
        )
        data = encode_sequence(seq)
        ok = encode_sequence(decode_sequence(data)) == data
        return _check("format_round_trip", ok, "OCCV and OCCS re-encode")

    # Flow

    def check_dlt_exact(self) -> PropertyCheck:
        worst = 0.0
        for i in range(RANDOM_CASES):
            rng = np.random.default_rng([self.seed, i])
            m = np.eye(3) + rng.uniform(-0.2, 0.2, size=(3, 3))
            m[2, :2] = rng.uniform(-1e-3, 1e-3, size=2)
            m = m / m[2, 2]
            src = rng.uniform(0.0, 50.0, size=(8, 2))
            dst = Homography(m).apply(src)
            est = normalized_dlt(src, dst)
            if est is None:
                return _check("dlt_exact", False, f"draw {i} degenerate")
            worst = max(worst, float(np.max(np.abs(est / est[2, 2] - m))))
        return _check(
            "dlt_exact",
            worst <= 1e-6,
            f"max entry error {worst:.3e} over {RANDOM_CASES} draws",
            max_error=worst,
        )

    def _recovery(self, preset: str, tol: float) -> PropertyCheck:
        seq, motion = generate(get_preset(preset, self.seed))
        history, _ = split(seq, 2)
        est = estimate_history_flow(
            history, FlowParams(seed=self.seed), threads=self.threads
        )
        w, h, _ = seq.dims
        te = transfer_error(
            est.homography, motion.homographies[0], grid_points(w, h)
        )
        return _check(
            f"{preset}_recovery",
            est.fallback is None and te <= tol,
            f"transfer error {te:.4f} (<= {tol})",
            transfer_error=te,
            inliers=est.inlier_count,
        )

    def check_ego_translation_recovery(self) -> PropertyCheck:
        return self._recovery("ego_translation", RECOVERY_TOLERANCE)

    def check_ego_rotation_recovery(self) -> PropertyCheck:
        return self._recovery("ego_rotation", RECOVERY_TOLERANCE)

    # Forecasting and fusion on presets

    def _preset_split(self, preset: str):
        seq, _ = generate(get_preset(preset, self.seed))
        return split(seq, HISTORY_FRAMES)

    def check_static_fixed_point(self) -> PropertyCheck:
        history, future = self._preset_split("static")
        p = ForecastParams(horizon=HORIZON, flow=FlowParams(seed=self.seed))
        flow_pred = forecast(history, p, threads=self.threads)
        baseline = copy_paste(history, HORIZON)
        methods = {
            "forecast": list(flow_pred),
            "copy_paste": list(baseline),
            "quality_fuse": [
                quality_fuse(a, b) for a, b in zip(flow_pred, baseline)
            ],
        }
        for method, frames in methods.items():
            for k, (pred, gt) in enumerate(zip(frames, future), start=1):
                rep = miou(pred, gt)
                if rep.iou_occupancy != 1.0 or rep.miou != 1.0:
                    return _check(
                        "static_fixed_point",
                        False,
                        f"{method} horizon {k}: IoU {rep.iou_occupancy}, "
                        f"mIoU {rep.miou}",
                    )
        return _check(
            "static_fixed_point", True, "IoU and mIoU are 1.0 at every horizon"
        )

    def check_dynamic_dominance(self) -> PropertyCheck:
        seq, motion = generate(get_preset("translating_car", self.seed))
        history, future = split(seq, HISTORY_FRAMES)
        p = ForecastParams(horizon=HORIZON, flow=FlowParams(seed=self.seed))
        flow_pred = forecast(history, p, threads=self.threads)
        baseline = copy_paste(history, HORIZON)
        flow_iou = [iou_occupancy(a, g) for a, g in zip(flow_pred, future)]
        base_iou = [iou_occupancy(a, g) for a, g in zip(baseline, future)]
        want_flow, want_base = footprint_iou_oracle(
            seq[0], motion.object_poses["car"], HISTORY_FRAMES - 1, HORIZON
        )
        deviation = max(
            abs(a - b)
            for a, b in zip(flow_iou + base_iou, want_flow + want_base)
        )
        ok = deviation <= ORACLE_TOLERANCE and all(
            f > b for f, b in zip(flow_iou, base_iou)
        )
        return _check(
            "dynamic_dominance",
            ok,
            "forecast IoU "
            + ", ".join(f"{v:.4f}" for v in flow_iou)
            + " vs copy-paste "
            + ", ".join(f"{v:.4f}" for v in base_iou)
            + f", max oracle deviation {deviation:.3e}",
            forecast=flow_iou,
            copy_paste=base_iou,
            max_error=deviation,
        )

    def check_fusion_oracle(self) -> PropertyCheck:
        for i in range(RANDOM_CASES):
            rng = np.random.default_rng([self.seed, i])
            c = int(rng.integers(2, 7))
            a = _random_grid(rng, (8, 8, 4), c)
            b = _random_grid(rng, (8, 8, 4), c)
            fused = quality_fuse(a, b, 0.5)
            if not np.array_equal(fused.labels, _fuse_oracle(a, b, 0.5)):
                return _check("fusion_oracle", False, f"case {i} differs")
        return _check(
            "fusion_oracle", True, f"{RANDOM_CASES} random pairs bit-equal"
        )

    # Losses and metrics

    def check_lovasz_vertex(self) -> PropertyCheck:
        worst = 0.0
        for i in range(RANDOM_CASES):
            rng = np.random.default_rng([self.seed, i])
            c = int(rng.integers(2, 6))
            pred = _random_grid(rng, (6, 6, 3), c)
            gt = _random_grid(rng, (6, 6, 3), c)
            values = lovasz_per_class(one_hot(pred, c), gt)
            ious = confusion(pred, gt, c).per_class_iou()
            for cls, value in values.items():
                worst = max(worst, abs(value - (1.0 - ious[cls])))
        return _check(
            "lovasz_vertex",
            worst <= ORACLE_TOLERANCE,
            f"max deviation from 1 - IoU: {worst:.3e}",
            max_error=worst,
        )

    def check_metric_oracle(self) -> PropertyCheck:
        for i in range(RANDOM_CASES):
            rng = np.random.default_rng([self.seed, i])
            c = int(rng.integers(2, 6))
            pred = _random_grid(rng, (6, 6, 3), c)
            gt = _random_grid(rng, (6, 6, 3), c)
            expected = _confusion_oracle(pred.labels, gt.labels, c)
            if not np.array_equal(confusion(pred, gt, c).counts, expected):
                return _check("metric_oracle", False, f"confusion case {i}")
            if miou(pred, gt, num_classes=c).miou != _miou_oracle(
                pred.labels, gt.labels, c
            ):
                return _check("metric_oracle", False, f"mIoU case {i}")
            bev = bev_metrics(pred, gt, num_classes=c).miou
            top_p = _top_label_oracle(pred.labels)
            top_g = _top_label_oracle(gt.labels)
            if bev != _miou_oracle(top_p, top_g, c):
                return _check("metric_oracle", False, f"BEV mIoU case {i}")
        return _check(
            "metric_oracle", True, f"{RANDOM_CASES} random pairs match"
        )

    def check_synth_determinism(self) -> PropertyCheck:
        for name in ("static", "crossing_pair", "ego_rotation"):
            first, _ = generate(get_preset(name, self.seed))
            second, _ = generate(get_preset(name, self.seed))
            if encode_sequence(first) != encode_sequence(second):
                return _check("synth_determinism", False, f"{name} differs")
        return _check(
            "synth_determinism", True, "presets regenerate byte-identically"
        )


def main() -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    result = PropertyChecker().run_checks()
    for check in result.checks:
        print(f"{check.status.value.upper():7s} {check.name}: {check.message}")
    print(f"overall: {result.overall_status.value} ({result.elapsed_s:.1f}s)")
    return 0 if result.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
