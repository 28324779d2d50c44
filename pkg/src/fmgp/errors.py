"""Exception types shared across the package.

The CLI maps these onto process exit codes; library code raises them
directly so callers can distinguish bad configuration from bad data and
from numerical failure.
"""


class FmgpError(Exception):
    """Base class for all package errors."""


class ConfigError(FmgpError):
    """Invalid configuration: unknown keys, malformed values, bad architecture."""


class ShapeError(FmgpError):
    """Array shape or dimension mismatch between arguments."""


class DomainError(FmgpError):
    """Argument outside its mathematical domain (e.g. a non-positive variance)."""


class DataError(FmgpError):
    """Unusable input data: parse failures, empty tables, degenerate labels."""


class NumericError(FmgpError):
    """Numerical failure: non-finite values, failed factorizations, lost positivity."""


class TrainingError(NumericError):
    """Optimization diverged; carries the iteration at which it happened."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
