import contextlib
import io
import logging
import tempfile
import unittest
from pathlib import Path

from scripts import validate_config
from scripts.utils import log_stage


class TestValidateConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _run(self, *argv):
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            code = validate_config.main(list(argv))
        return code, out.getvalue()

    def test_valid_config(self):
        path = self.root / "ok.yml"
        path.write_text("history_path: history.occs\nhorizon: 2\n")
        code, out = self._run(str(path))
        self.assertEqual(code, 0)
        self.assertIn("config validation passed", out)

    def test_invalid_config(self):
        path = self.root / "bad.yml"
        path.write_text("horizon: 0\n")
        code, out = self._run(str(path))
        self.assertEqual(code, 1)
        self.assertIn("code=CONFIG_INVALID", out)

    def test_check_paths(self):
        path = self.root / "ok.yml"
        path.write_text("history_path: history.occs\n")
        code, out = self._run(str(path), "--check-paths")
        self.assertEqual(code, 1)
        self.assertIn("missing inputs", out)
        (self.root / "history.occs").write_bytes(b"")
        code, _ = self._run(str(path), "--check-paths")
        self.assertEqual(code, 0)


class TestLogStage(unittest.TestCase):
    def test_logs_and_returns(self):
        logger = logging.getLogger("test.stage")

        @log_stage(logger, "demo")
        def add(a, b):
            return a + b

        with self.assertLogs(logger, level="INFO") as logs:
            self.assertEqual(add(2, 3), 5)
        self.assertIn("stage demo finished", logs.output[0])

    def test_exception_propagates(self):
        @log_stage()
        def fail():
            raise ValueError("boom")

        with self.assertRaises(ValueError):
            fail()
        self.assertEqual(fail.__name__, "fail")


if __name__ == "__main__":
    unittest.main()
