"""
Exception hierarchy shared by every pipeline stage.

Each exception class carries the exit code the CLI reports for it:
0 success, 1 unexpected, 2 config error, 3 data error, 4 numeric/solver error.
"""

import logging
from functools import wraps
from typing import List, Optional

logger = logging.getLogger(__name__)


class LocdiscError(Exception):
    """Base class for every error raised on purpose by locdisc."""

    exit_code = 1


class ConfigError(LocdiscError):
    """The run configuration violates its schema. Holds every problem found, not just the first."""

    exit_code = 2

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) if self.problems else "invalid configuration")


class DataError(LocdiscError):
    exit_code = 3


class ParseError(DataError):
    """A data or labels file could not be parsed. `line` is 1-based."""

    def __init__(self, path: str, line: int, kind: str, detail: str):
        self.path = path
        self.line = line
        self.kind = kind
        self.detail = detail
        super().__init__(f"{path}:{line}: {kind}: {detail}")


class KernelError(DataError):
    pass


class NumericError(LocdiscError):
    exit_code = 4


class GraphError(NumericError):
    pass


class SolverError(NumericError):
    pass


class EvaluationError(NumericError):
    pass


class StageError(LocdiscError):
    """A failure inside a named pipeline stage. Keeps the exit code of the underlying cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage '{stage}' failed: {cause}")


class ExperimentError(LocdiscError):
    """A repeat of an experiment failed; records the seed so the repeat can be replayed."""

    def __init__(self, repeat: int, seed: int, cause: BaseException, method: Optional[str] = None):
        self.repeat = repeat
        self.seed = seed
        self.cause = cause
        self.method = method
        self.exit_code = getattr(cause, "exit_code", 1)
        prefix = f"method '{method}' " if method else ""
        super().__init__(f"{prefix}repeat {repeat} (seed {seed}) failed: {cause}")


def pipeline_stage(stage: str):
    """
    Decorator naming the pipeline stage a function belongs to.

    Failures are logged once and re-raised as StageError so the CLI can report
    which stage broke. A StageError raised by a nested stage passes through untouched.
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except (StageError, ExperimentError):
                raise
            except Exception as e:
                logger.error(f"Stage '{stage}' failed in {func.__name__}: {e}")
                raise StageError(stage, e) from e

        return wrapper

    return decorator
