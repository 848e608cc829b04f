"""
Error types shared by every module of the lab.

Each error carries a category that the command line maps onto an exit code:
usage -> 1, data/config -> 2, numeric -> 3.
"""

from typing import Any, Dict, List, Optional, Tuple


class LabError(Exception):
    """Base class for all lab errors."""

    category = "data"

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = dict(context or {})

    def with_context(self, **context: Any) -> "LabError":
        """Return the same error with extra context merged in (outer keys win)."""
        self.context = {**self.context, **context}
        return self

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in sorted(self.context.items()))
        return f"{self.message} ({details})"


# nn-core
class InvalidSpecError(LabError):
    category = "config"


class ShapeError(LabError):
    pass


class LabelError(LabError):
    pass


class UnsupportedActivationError(LabError):
    category = "config"


class DivergenceError(LabError):
    category = "numeric"

    def __init__(self, message: str, step: int, last_checkpoint: Optional[Any] = None,
                 context: Optional[Dict[str, Any]] = None):
        super().__init__(message, context)
        self.step = step
        self.last_checkpoint = last_checkpoint


# data
class EmptyDataError(LabError):
    pass


class InvalidParameterError(LabError):
    category = "config"


class StratificationError(LabError):
    pass


class MatchedDistributionError(LabError):
    def __init__(self, message: str, cells: List[Tuple[int, int]],
                 context: Optional[Dict[str, Any]] = None):
        super().__init__(message, context)
        self.cells = cells


class InsufficientReserveError(LabError):
    def __init__(self, message: str, deficit: int, context: Optional[Dict[str, Any]] = None):
        super().__init__(message, context)
        self.deficit = deficit


class GroupError(LabError):
    pass


class ClassSelectionError(LabError):
    pass


class IdxFormatError(LabError):
    def __init__(self, message: str, path: str, offset: int):
        super().__init__(f"{message} at byte offset {offset} in {path}")
        self.path = path
        self.offset = offset


class DatasetInvariantError(LabError):
    pass


# metrics
class EmptyGroupError(LabError):
    pass


class DegenerateMeanError(LabError):
    category = "numeric"


class IncompleteProtocolError(LabError):
    pass


# stats
class SingularDesignError(LabError):
    category = "numeric"

    def __init__(self, message: str, dependent_columns: List[str],
                 context: Optional[Dict[str, Any]] = None):
        super().__init__(message, context)
        self.dependent_columns = dependent_columns


class DegreesOfFreedomError(LabError):
    category = "numeric"


class DegenerateResponseError(LabError):
    category = "numeric"


class SchemaError(LabError):
    pass


# reports
class ReportIOError(LabError):
    def __init__(self, message: str, path: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(f"{message}: {path}", context)
        self.path = path


# configuration and command line
class ConfigError(LabError):
    category = "config"


class UsageError(LabError):
    category = "usage"


EXIT_CODES = {"usage": 1, "data": 2, "config": 2, "numeric": 3}


def exit_code_for(error: LabError) -> int:
    return EXIT_CODES.get(error.category, 2)
