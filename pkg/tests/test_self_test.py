import unittest
from unittest.mock import patch

from scripts import self_test as st
from src.occupancy.errors import HistoryTooShort


def _stub(name, status):
    def check():
        return st.PropertyCheck(name=name, status=status, message=name)

    check.__name__ = f"check_{name}"
    return check


class TestPropertyChecker(unittest.TestCase):
    def test_overall_passed(self):
        checker = st.PropertyChecker()
        stubs = [_stub("a", st.CheckStatus.PASSED)]
        with patch.object(checker, "_checks", return_value=stubs):
            result = checker.run_checks()
        self.assertEqual(result.overall_status, st.SuiteStatus.PASSED)
        self.assertTrue(result.passed)

    def test_warning_does_not_fail(self):
        checker = st.PropertyChecker()
        stubs = [
            _stub("a", st.CheckStatus.PASSED),
            _stub("b", st.CheckStatus.WARNING),
        ]
        with patch.object(checker, "_checks", return_value=stubs):
            result = checker.run_checks()
        self.assertEqual(result.overall_status, st.SuiteStatus.WARNING)
        self.assertTrue(result.passed)

    def test_failure_wins(self):
        checker = st.PropertyChecker()
        stubs = [
            _stub("a", st.CheckStatus.WARNING),
            _stub("b", st.CheckStatus.FAILED),
        ]
        with patch.object(checker, "_checks", return_value=stubs):
            result = checker.run_checks()
        self.assertEqual(result.overall_status, st.SuiteStatus.FAILED)
        self.assertFalse(result.passed)

    def test_typed_error_becomes_failed_check(self):
        def check_boom():
            raise HistoryTooShort("need two frames")

        checker = st.PropertyChecker()
        with patch.object(checker, "_checks", return_value=[check_boom]):
            result = checker.run_checks()
        self.assertEqual(result.checks[0].name, "boom")
        self.assertEqual(result.checks[0].status, st.CheckStatus.FAILED)
        self.assertIn("HISTORY_TOO_SHORT", result.checks[0].message)

    def test_slow_suite_warns(self):
        checker = st.PropertyChecker()
        stubs = [_stub("a", st.CheckStatus.PASSED)]
        with patch.object(checker, "_checks", return_value=stubs), patch(
            "scripts.self_test.time.perf_counter", side_effect=[0.0, 31.0]
        ):
            result = checker.run_checks()
        self.assertEqual(result.checks[-1].name, "time_budget")
        self.assertEqual(result.overall_status, st.SuiteStatus.WARNING)


class TestIndividualChecks(unittest.TestCase):
    """The real properties on the synthetic presets."""

    def setUp(self):
        self.checker = st.PropertyChecker()

    def test_format_round_trip(self):
        result = self.checker.check_format_round_trip()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_dlt_exact(self):
        result = self.checker.check_dlt_exact()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_ego_translation_recovery(self):
        result = self.checker.check_ego_translation_recovery()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_ego_rotation_recovery(self):
        result = self.checker.check_ego_rotation_recovery()
        self.assertEqual(result.status, st.CheckStatus.PASSED)
        self.assertLessEqual(
            result.details["transfer_error"], st.RECOVERY_TOLERANCE
        )

    def test_dynamic_dominance_matches_footprint_oracle(self):
        result = self.checker.check_dynamic_dominance()
        self.assertEqual(result.status, st.CheckStatus.PASSED)
        self.assertLessEqual(result.details["max_error"], 1e-12)

    def test_recovery_tolerance_is_a_tenth_of_a_cell(self):
        self.assertEqual(st.RECOVERY_TOLERANCE, 0.1)

    def test_static_fixed_point(self):
        result = self.checker.check_static_fixed_point()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_fusion_oracle(self):
        result = self.checker.check_fusion_oracle()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_lovasz_vertex(self):
        result = self.checker.check_lovasz_vertex()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_metric_oracle(self):
        result = self.checker.check_metric_oracle()
        self.assertEqual(result.status, st.CheckStatus.PASSED)

    def test_full_suite(self):
        result = self.checker.run_checks()
        failed = [
            c.name
            for c in result.checks
            if c.status == st.CheckStatus.FAILED
        ]
        self.assertEqual(failed, [])
        self.assertTrue(result.passed)


if __name__ == "__main__":
    unittest.main()
