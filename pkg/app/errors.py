"""
Exception hierarchy shared by the library, the CLI and the readout service.

Each class carries the process exit code the CLI reports for it.
"""

from typing import Optional


class MultitauError(Exception):
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class FileFormatError(MultitauError):
    """A file could not be parsed."""

    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class MalformedStreamError(MultitauError):
    """Photon stream or interval record violates its invariants."""

    exit_code = 2


class PhysicsValidationError(MultitauError):
    exit_code = 3


class NonConvergenceError(MultitauError):
    exit_code = 4


class ConfigurationError(MultitauError):
    exit_code = 5


class LifecycleError(MultitauError):
    exit_code = 5


class NoDataError(MultitauError):
    exit_code = 5


class InsufficientDataError(MultitauError):
    exit_code = 5


class RankDeficientFitError(MultitauError):
    exit_code = 5


class AccumulatorOverflowError(MultitauError):
    exit_code = 6
