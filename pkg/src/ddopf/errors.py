"""Exception types raised across the package."""

from __future__ import annotations


class DdopfError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(DdopfError, ValueError):
    pass


class ConnectivityError(DdopfError):
    """Raised when the branch graph has more than one connected component."""

    def __init__(self, components: list[list[int]]):
        self.components = components
        listing = "; ".join("{" + ", ".join(str(b) for b in comp) + "}" for comp in components)
        super().__init__(f"grid is not connected: {len(components)} components: {listing}")


class NumericalError(DdopfError, ArithmeticError):
    pass


class DimensionError(DdopfError, ValueError):
    pass


class ParseError(DdopfError, ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class MissingFieldError(ParseError):
    pass


class UnsupportedCostError(DdopfError, ValueError):
    pass


class CaseReferenceError(DdopfError, ValueError):
    """A device or branch points to a bus that does not exist."""


class CaseValidationError(DdopfError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class AlignmentError(DdopfError, ValueError):
    pass


class InsufficientDataError(DdopfError, ValueError):
    pass


class PersistencyError(DdopfError):
    """Recorded data is not persistently exciting of the required order."""


class ForecastInfeasibleError(DdopfError):
    """Disturbance forecast lies outside the range of the disturbance Hankel block."""


class InfeasibleScheduleError(DdopfError):
    def __init__(self, message: str, violated: list[str] | None = None, status: str | None = None):
        self.violated = list(violated or [])
        self.status = status
        super().__init__(message)
