"""
Typed errors for the occupancy toolkit.

Every failure the pipeline can raise carries a stable ``ErrorCode`` string
so the command-line runner can report it in a machine-parsable form.
"""

from __future__ import annotations

from enum import Enum
from typing import Any, Dict, Optional


class ErrorCode(str, Enum):
    """Stable error codes surfaced by the runner."""

    # Grid / container formats
    BAD_MAGIC = "BAD_MAGIC"
    TRUNCATED_FILE = "TRUNCATED_FILE"
    TRAILING_BYTES = "TRAILING_BYTES"
    UNSUPPORTED_VERSION = "UNSUPPORTED_VERSION"
    LABEL_OUT_OF_RANGE = "LABEL_OUT_OF_RANGE"
    DIMS_OVERFLOW = "DIMS_OVERFLOW"
    INVALID_DIMS = "INVALID_DIMS"
    IO_FAILURE = "IO_FAILURE"
    SIZE_MISMATCH = "SIZE_MISMATCH"

    # Sequences
    FRAME_DIM_MISMATCH = "FRAME_DIM_MISMATCH"
    EMPTY_SEQUENCE = "EMPTY_SEQUENCE"
    LENGTH_MISMATCH = "LENGTH_MISMATCH"

    # Geometry
    INDEX_OUT_OF_RANGE = "INDEX_OUT_OF_RANGE"
    DIM_MISMATCH = "DIM_MISMATCH"
    TOO_FEW_CORRESPONDENCES = "TOO_FEW_CORRESPONDENCES"
    DEGENERATE_CONFIGURATION = "DEGENERATE_CONFIGURATION"
    TOO_FEW_INLIERS = "TOO_FEW_INLIERS"
    PROJECTIVE_DIVIDE_BY_ZERO = "PROJECTIVE_DIVIDE_BY_ZERO"
    SINGULAR_HOMOGRAPHY = "SINGULAR_HOMOGRAPHY"

    # Forecasting / fusion / metrics
    HISTORY_TOO_SHORT = "HISTORY_TOO_SHORT"
    NOT_PROBABILITY = "NOT_PROBABILITY"
    EMPTY_CLASS_SET = "EMPTY_CLASS_SET"
    INVALID_PARAMETER = "INVALID_PARAMETER"

    # Synthetic scenes and configuration
    INVALID_SCENARIO = "INVALID_SCENARIO"
    UNKNOWN_PRESET = "UNKNOWN_PRESET"
    CONFIG_INVALID = "CONFIG_INVALID"


class OccupancyError(Exception):
    """Base class for all typed pipeline errors."""

    code: ErrorCode = ErrorCode.INVALID_PARAMETER

    def __init__(
        self, message: str, details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details or {}

    def one_line(self) -> str:
        """Render as ``error code=<CODE> message="..."``."""
        text = self.message.replace('"', "'").replace("\n", " ")
        return f'error code={self.code.value} message="{text}"'


class BadMagic(OccupancyError):
    code = ErrorCode.BAD_MAGIC


class TruncatedFile(OccupancyError):
    code = ErrorCode.TRUNCATED_FILE


class TrailingBytes(OccupancyError):
    code = ErrorCode.TRAILING_BYTES


class UnsupportedVersion(OccupancyError):
    code = ErrorCode.UNSUPPORTED_VERSION


class LabelOutOfRange(OccupancyError):
    code = ErrorCode.LABEL_OUT_OF_RANGE

    def __init__(self, x: int, y: int, z: int, value: int, num_classes: int):
        super().__init__(
            f"label {value} at ({x},{y},{z}) is not < {num_classes}",
            {"x": x, "y": y, "z": z, "value": value},
        )
        self.x = x
        self.y = y
        self.z = z
        self.value = value


class DimsOverflow(OccupancyError):
    code = ErrorCode.DIMS_OVERFLOW


class InvalidDims(OccupancyError):
    code = ErrorCode.INVALID_DIMS


class IoFailure(OccupancyError):
    code = ErrorCode.IO_FAILURE


class SizeMismatch(OccupancyError):
    code = ErrorCode.SIZE_MISMATCH


class FrameDimMismatch(OccupancyError):
    code = ErrorCode.FRAME_DIM_MISMATCH


class EmptySequence(OccupancyError):
    code = ErrorCode.EMPTY_SEQUENCE


class LengthMismatch(OccupancyError):
    code = ErrorCode.LENGTH_MISMATCH


class IndexOutOfRange(OccupancyError):
    code = ErrorCode.INDEX_OUT_OF_RANGE


class DimMismatch(OccupancyError):
    code = ErrorCode.DIM_MISMATCH


class TooFewCorrespondences(OccupancyError):
    code = ErrorCode.TOO_FEW_CORRESPONDENCES


class DegenerateConfiguration(OccupancyError):
    code = ErrorCode.DEGENERATE_CONFIGURATION


class TooFewInliers(OccupancyError):
    code = ErrorCode.TOO_FEW_INLIERS


class ProjectiveDivideByZero(OccupancyError):
    code = ErrorCode.PROJECTIVE_DIVIDE_BY_ZERO


class SingularHomography(OccupancyError):
    code = ErrorCode.SINGULAR_HOMOGRAPHY


class HistoryTooShort(OccupancyError):
    code = ErrorCode.HISTORY_TOO_SHORT


class NotProbability(OccupancyError):
    code = ErrorCode.NOT_PROBABILITY


class EmptyClassSet(OccupancyError):
    code = ErrorCode.EMPTY_CLASS_SET


class InvalidParameter(OccupancyError):
    code = ErrorCode.INVALID_PARAMETER


class InvalidScenario(OccupancyError):
    code = ErrorCode.INVALID_SCENARIO


class UnknownPreset(OccupancyError):
    code = ErrorCode.UNKNOWN_PRESET


class ConfigInvalid(OccupancyError):
    code = ErrorCode.CONFIG_INVALID
