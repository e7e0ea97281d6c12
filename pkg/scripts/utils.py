"""Shared utility functions for the occupancy runner scripts."""

from __future__ import annotations

import logging
import time
from functools import wraps
from typing import Callable, Optional, TypeVar

F = TypeVar("F", bound=Callable)


def log_stage(logger: Optional[logging.Logger] = None, name: str = ""):
    """Decorator that logs the wall time of a pipeline stage.

    Args:
        logger: Logger to report to (default: the module's own logger)
        name: Stage label (default: the wrapped function's name)

    Exceptions propagate unchanged; a failed stage is logged at DEBUG with
    its elapsed time.
    """

    def decorator(func: F) -> F:
        stage = name or func.__name__
        log = logger or logging.getLogger(func.__module__)

        @wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception:
                log.debug(
                    "stage %s failed after %.3fs",
                    stage,
                    time.perf_counter() - start,
                )
                raise
            log.info(
                "stage %s finished in %.3fs",
                stage,
                time.perf_counter() - start,
            )
            return result

        return wrapper

    return decorator
