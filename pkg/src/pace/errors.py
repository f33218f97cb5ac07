"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numerical failures exit 3.
"""

from __future__ import annotations


class PaceError(Exception):
    """Base class for all package errors."""


class UsageError(PaceError):
    """Bad command-line invocation (unknown flag, missing argument)."""


class InputError(PaceError):
    """Caller passed structurally invalid data (shape, length, ordering)."""


class DataFormatError(InputError):
    """A file on disk could not be parsed.

    Carries file/line context so the offending row can be located.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class DomainError(PaceError):
    """A value is outside its physically or mathematically valid range."""


class InsufficientDataError(InputError):
    """Too few samples to attempt the requested computation."""


class DegenerateFitError(PaceError):
    """The fit could not proceed numerically even after damping escalation.

    ``last_result`` holds the best iterate reached before the failure.
    """

    def __init__(self, message: str, last_result=None):
        super().__init__(message)
        self.last_result = last_result


class NumericError(PaceError):
    """A numeric computation produced non-finite values."""
