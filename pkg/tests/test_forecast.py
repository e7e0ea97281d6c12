"""Tests for flow warping, forecasting and the Copy&Paste baseline."""

import unittest
from collections import Counter

import numpy as np

from src.occupancy.errors import HistoryTooShort, InvalidParameter
from src.occupancy.flow import FlowEstimate, FlowParams, Homography
from src.occupancy.forecast import (
    ForecastParams,
    Strategy,
    WarpMode,
    copy_paste,
    estimate_history_flow,
    forecast,
    warp_grid,
)
from src.occupancy.grid import OccGrid, OccSequence
from src.occupancy.metrics import iou_occupancy
from src.occupancy.synth import generate, get_preset, split


def occupied_voxels(grid: OccGrid) -> set:
    return {tuple(v) for v in np.argwhere(grid.labels != 0).tolist()}


def moved(voxels: set, dx: int, dy: int, dims) -> set:
    """Voxels shifted by whole cells; whatever leaves the grid is dropped."""
    return {
        (x + dx, y + dy, z)
        for x, y, z in voxels
        if 0 <= x + dx < dims[0] and 0 <= y + dy < dims[1]
    }


def set_iou(a: set, b: set) -> float:
    union = len(a | b)
    return 1.0 if union == 0 else len(a & b) / union


def coordinate_grids(size: int):
    """Two single-layer grids whose labels are ``x + 1`` and ``y + 1``."""
    xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return (
        OccGrid(labels=(xs + 1)[..., None], num_classes=size + 1),
        OccGrid(labels=(ys + 1)[..., None], num_classes=size + 1),
    )


def column_multiset(grid: OccGrid) -> Counter:
    return Counter(
        grid.labels[x, y].tobytes()
        for x in range(grid.dims_x)
        for y in range(grid.dims_y)
        if grid.labels[x, y].any()
    )


class TestWarpGrid(unittest.TestCase):
    """Tests for column warping."""

    def setUp(self):
        labels = np.zeros((4, 4, 2), dtype=np.uint8)
        labels[1, 1] = [11, 4]
        self.grid = OccGrid(labels=labels)

    def test_identity_either_mode(self):
        for mode in WarpMode:
            out = warp_grid(self.grid, Homography.identity(), mode)
            self.assertEqual(out, self.grid)

    def test_backward_translation(self):
        out = warp_grid(
            self.grid, Homography.translation(1, 0), WarpMode.BACKWARD_NN
        )
        self.assertEqual(out.labels[2, 1].tolist(), [11, 4])
        self.assertEqual(int(out.occupied().sum()), 2)

    def test_modes_agree_without_collisions(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 18, size=(10, 8, 3), dtype=np.uint8)
        grid = OccGrid(labels=labels)
        h = Homography.translation(2, -1)
        self.assertEqual(
            warp_grid(grid, h, WarpMode.BACKWARD_NN),
            warp_grid(grid, h, WarpMode.FORWARD_SPLAT),
        )

    def test_label_conservation_under_translation(self):
        rng = np.random.default_rng(8)
        labels = np.zeros((12, 12, 3), dtype=np.uint8)
        labels[2:8, 3:7] = rng.integers(0, 18, size=(6, 4, 3))
        grid = OccGrid(labels=labels)
        out = warp_grid(grid, Homography.translation(3, 2))
        self.assertEqual(column_multiset(out), column_multiset(grid))

    def _collision_grid(self, second_column):
        labels = np.zeros((6, 1, 2), dtype=np.uint8)
        labels[1, 0] = [4, 0]
        labels[2, 0] = second_column
        return OccGrid(labels=labels)

    def test_forward_splat_denser_column_wins(self):
        grid = self._collision_grid([7, 7])
        h = Homography.similarity(0.0, scale=0.5)
        out = warp_grid(grid, h, WarpMode.FORWARD_SPLAT)
        self.assertEqual(out.labels[1, 0].tolist(), [7, 7])

    def test_forward_splat_tie_prefers_smaller_source(self):
        grid = self._collision_grid([7, 0])
        h = Homography.similarity(0.0, scale=0.5)
        backward = warp_grid(grid, h, WarpMode.BACKWARD_NN)
        forward = warp_grid(grid, h, WarpMode.FORWARD_SPLAT)
        self.assertEqual(backward.labels[1, 0].tolist(), [7, 0])
        self.assertEqual(forward.labels[1, 0].tolist(), [4, 0])

    def test_out_of_bounds_sources_are_empty(self):
        out = warp_grid(self.grid, Homography.translation(5, 0))
        self.assertFalse(out.occupied().any())


class TestCopyPaste(unittest.TestCase):
    def test_repeats_last_frame(self):
        seq, _ = generate(get_preset("crossing_pair"))
        history, _ = split(seq, 4)
        out = copy_paste(history, 4)
        self.assertEqual(len(out), 4)
        for frame in out:
            self.assertEqual(frame, history.last)

    def test_invalid_horizon(self):
        with self.assertRaises(InvalidParameter):
            copy_paste(OccSequence((OccGrid.empty((2, 2, 2)),)), 0)

    def test_static_scene_is_perfect(self):
        seq, _ = generate(get_preset("static"))
        history, future = split(seq, 4)
        for pred, gt in zip(copy_paste(history, 4), future):
            self.assertEqual(iou_occupancy(pred, gt), 1.0)

    def test_translating_car_degrades_with_horizon(self):
        seq, _ = generate(get_preset("translating_car"))
        history, future = split(seq, 4)
        pred = copy_paste(history, 4)
        ious = [iou_occupancy(p, g) for p, g in zip(pred, future)]
        for earlier, later in zip(ious, ious[1:]):
            self.assertGreater(earlier, later)

    def test_matches_footprint_oracle(self):
        seq, motion = generate(get_preset("translating_car"))
        history, future = split(seq, 4)
        poses = motion.object_poses["car"]
        body = occupied_voxels(seq[0])
        offset = [
            (int(round(p.x - poses[0].x)), int(round(p.y - poses[0].y)))
            for p in poses
        ]
        last = moved(body, *offset[3], seq.dims)
        for k, pred in enumerate(copy_paste(history, 4), start=1):
            truth = moved(body, *offset[3 + k], seq.dims)
            self.assertAlmostEqual(
                iou_occupancy(pred, future[k - 1]),
                set_iou(last, truth),
                delta=1e-12,
            )


class TestForecast(unittest.TestCase):
    """Tests for flow-based forecasting on synthetic scenes."""

    def test_history_too_short(self):
        single = OccSequence((OccGrid.empty((4, 4, 2)),))
        with self.assertRaises(HistoryTooShort):
            forecast(single)

    def test_static_scene_repeats_last_frame(self):
        seq, _ = generate(get_preset("static"))
        history, future = split(seq, 4)
        out = forecast(history, ForecastParams(horizon=4))
        self.assertEqual(len(out), 4)
        for pred, gt in zip(out, future):
            self.assertTrue(np.array_equal(pred.labels, history.last.labels))
            self.assertEqual(iou_occupancy(pred, gt), 1.0)

    def test_translating_car_matches_ground_truth(self):
        seq, _ = generate(get_preset("translating_car"))
        history, future = split(seq, 4)
        out = forecast(history, ForecastParams(horizon=2))
        for pred, gt in zip(out, future):
            self.assertTrue(np.array_equal(pred.labels, gt.labels))

    def test_flow_beats_copy_paste_on_moving_car(self):
        seq, _ = generate(get_preset("translating_car"))
        history, future = split(seq, 4)
        flow_pred = forecast(history, ForecastParams(horizon=4))
        baseline = copy_paste(history, 4)
        for k in range(4):
            self.assertGreater(
                iou_occupancy(flow_pred[k], future[k]),
                iou_occupancy(baseline[k], future[k]),
            )

    def test_composed_equals_iterated_for_translation(self):
        seq, _ = generate(get_preset("translating_car"))
        history, _ = split(seq, 4)
        estimate = estimate_history_flow(history, FlowParams())
        composed = forecast(
            history,
            ForecastParams(horizon=3, strategy=Strategy.COMPOSED),
            estimate=estimate,
        )
        iterated = forecast(
            history,
            ForecastParams(horizon=3, strategy=Strategy.ITERATED),
            estimate=estimate,
        )
        self.assertEqual(composed, iterated)

    def test_matches_footprint_oracle(self):
        seq, motion = generate(get_preset("translating_car"))
        history, future = split(seq, 4)
        poses = motion.object_poses["car"]
        body = occupied_voxels(seq[0])
        offset = [
            (int(round(p.x - poses[0].x)), int(round(p.y - poses[0].y)))
            for p in poses
        ]
        step = (offset[3][0] - offset[2][0], offset[3][1] - offset[2][1])
        last = moved(body, *offset[3], seq.dims)
        out = forecast(history, ForecastParams(horizon=4))
        for k, pred in enumerate(out, start=1):
            truth = moved(body, *offset[3 + k], seq.dims)
            expected = moved(last, k * step[0], k * step[1], seq.dims)
            self.assertAlmostEqual(
                iou_occupancy(pred, future[k - 1]),
                set_iou(expected, truth),
                delta=1e-12,
            )

    def _coordinate_drift(self, h: Homography, horizon: int):
        """Per-axis distance between the source cells the composed and the
        iterated strategies pick, over targets both fill."""
        labels = {}
        for axis, grid in zip("xy", coordinate_grids(32)):
            estimate = FlowEstimate(homography=h)
            frames = {}
            for strategy in Strategy:
                p = ForecastParams(horizon=horizon, strategy=strategy)
                seq = forecast(
                    OccSequence((grid, grid)), p, estimate=estimate
                )
                frames[strategy] = seq[horizon - 1].labels[..., 0]
            labels[axis] = frames
        composed = np.stack(
            [labels[a][Strategy.COMPOSED] for a in "xy"], axis=-1
        ).astype(np.int64)
        iterated = np.stack(
            [labels[a][Strategy.ITERATED] for a in "xy"], axis=-1
        ).astype(np.int64)
        both = (composed > 0).all(-1) & (iterated > 0).all(-1)
        return np.abs(composed - iterated)[both], int(both.sum())

    def test_composed_near_iterated_for_rotation(self):
        _, motion = generate(get_preset("ego_rotation"))
        drift, filled = self._coordinate_drift(motion.homographies[0], 2)
        self.assertGreater(filled, 32 * 32 // 2)
        self.assertLessEqual(int(drift.max()), 1)

    def test_composed_near_iterated_for_similarity(self):
        h = Homography.similarity(10.0, 1.5, -0.5, center=(15.5, 15.5))
        drift, filled = self._coordinate_drift(h, 2)
        self.assertGreater(filled, 32 * 32 // 2)
        self.assertLessEqual(int(drift.max()), 1)

    def test_precomputed_estimate_is_used(self):
        labels = np.zeros((8, 8, 2), dtype=np.uint8)
        labels[2, 2, 0] = 4
        grid = OccGrid(labels=labels)
        history = OccSequence((grid, grid))
        estimate = FlowEstimate(homography=Homography.translation(1, 1))
        out = forecast(history, ForecastParams(horizon=2), estimate=estimate)
        self.assertEqual(int(out[0].labels[3, 3, 0]), 4)
        self.assertEqual(int(out[1].labels[4, 4, 0]), 4)

    def test_fallback_gives_copy_paste(self):
        grid = OccGrid.empty((16, 16, 2))
        history = OccSequence((grid, grid))
        out = forecast(history, ForecastParams(horizon=3))
        self.assertEqual(out, copy_paste(history, 3))

    def test_output_keeps_frame_period(self):
        seq, _ = generate(get_preset("static"))
        history, _ = split(seq, 4)
        out = forecast(history, ForecastParams(horizon=1))
        self.assertEqual(out.frame_period_s, history.frame_period_s)


if __name__ == "__main__":
    unittest.main()
