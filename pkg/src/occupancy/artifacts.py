"""
Artifact event log for pipeline runs.

Every file a run writes is recorded as an ``ArtifactEvent`` carrying its
sha256 and size. Events are logged as JSON lines and collected into a
``manifest.json`` with no timestamps, so identical runs produce identical
manifests.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.occupancy.errors import IoFailure

MANIFEST_NAME = "manifest.json"


class ArtifactOperation(str, Enum):
    """Kinds of files a run produces."""

    SEQUENCE_WRITE = "sequence.write"
    GRID_WRITE = "grid.write"
    SIDECAR_WRITE = "sidecar.write"
    RAW_WRITE = "raw.write"
    BEV_WRITE = "bev.write"
    FLOW_WRITE = "flow.write"
    MATRIX_WRITE = "flow.matrix"
    CORRESPONDENCES_WRITE = "flow.correspondences"
    FEATURES_WRITE = "features.write"
    METRICS_WRITE = "metrics.write"
    MOTION_WRITE = "motion.write"


@dataclass
class ArtifactEvent:
    operation: str
    path: str
    sha256: str
    bytes: int
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArtifactEvent":
        return cls(
            operation=data["operation"],
            path=data["path"],
            sha256=data["sha256"],
            bytes=int(data["bytes"]),
            details=data.get("details", {}),
        )


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as e:
        raise IoFailure(f"cannot hash {path}: {e}") from e
    return digest.hexdigest()


class ArtifactLog:
    """
    Records artifacts written under ``root``.

    Paths are stored relative to ``root`` when possible so manifests do not
    depend on where the run directory lives.
    """

    def __init__(
        self,
        root: str | Path,
        logger_name: str = "occupancy.artifacts",
        log_file: Optional[str | Path] = None,
    ):
        self._root = Path(root)
        self._events: List[ArtifactEvent] = []
        self._logger = logging.getLogger(logger_name)
        self._logger.setLevel(logging.INFO)
        self._file_handler: Optional[logging.FileHandler] = None
        if log_file is not None:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            self._file_handler = logging.FileHandler(log_file)
            self._file_handler.setFormatter(
                logging.Formatter("%(message)s")
            )
            self._logger.addHandler(self._file_handler)

    @property
    def root(self) -> Path:
        return self._root

    @property
    def events(self) -> List[ArtifactEvent]:
        return list(self._events)

    def _relative(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self._root.resolve()).as_posix()
        except ValueError:
            return path.as_posix()

    def record(
        self,
        operation: ArtifactOperation | str,
        path: str | Path,
        details: Optional[Dict[str, Any]] = None,
    ) -> ArtifactEvent:
        """Hash an already-written file and log it."""
        if isinstance(operation, ArtifactOperation):
            operation = operation.value
        path = Path(path)
        event = ArtifactEvent(
            operation=operation,
            path=self._relative(path),
            sha256=file_sha256(path),
            bytes=path.stat().st_size,
            details=dict(details or {}),
        )
        self._events.append(event)
        self._logger.info(event.to_json())
        if self._file_handler:
            self._file_handler.flush()
        return event

    def manifest(self) -> Dict[str, Any]:
        events = sorted(self._events, key=lambda e: (e.path, e.operation))
        return {"artifacts": [e.to_dict() for e in events]}

    def write_manifest(self, name: str = MANIFEST_NAME) -> Path:
        target = self._root / name
        try:
            with open(target, "w", encoding="utf-8") as f:
                json.dump(self.manifest(), f, indent=2, sort_keys=True)
                f.write("\n")
        except OSError as e:
            raise IoFailure(f"cannot write {target}: {e}") from e
        return target

    def close(self) -> None:
        if self._file_handler:
            self._logger.removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None


def load_manifest(path: str | Path) -> List[ArtifactEvent]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"cannot read manifest {path}: {e}") from e
    return [ArtifactEvent.from_dict(d) for d in data.get("artifacts", [])]
