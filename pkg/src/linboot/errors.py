"""Exception hierarchy.

The CLI maps :class:`DataError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class LinbootError(Exception):
    pass


class DataError(LinbootError, ValueError):
    """Malformed, missing or inconsistent input data."""


class InsufficientSupportError(DataError):
    """Too few distinct observation times for the requested spline basis."""


class ArchiveError(DataError):
    """An on-disk artifact is missing, tampered with or from another version."""


class NumericalError(LinbootError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable result."""


class NotStrictMinimumError(NumericalError):
    def __init__(self, detail=""):
        msg = "not a strict local minimum"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class DegenerateClusteringError(NumericalError):
    """A clustering places all mass on one label, so its entropy is zero."""


class OptimizationFailed(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
