"""Exception hierarchy shared by every module."""


class BiseqError(Exception):
    """Base class for all library errors."""


class InputError(BiseqError, ValueError):
    """Bad user-supplied data (ids out of range, empty sequences, ...)."""


class ParseError(InputError):
    """A file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(InputError):
    """A file parsed but its contents are inconsistent."""


class DimensionError(BiseqError, ValueError):
    """Incompatible tensor shapes."""


class ConfigurationError(BiseqError, ValueError):
    """Invalid model or run configuration."""


class NumericError(BiseqError, ArithmeticError):
    """NaN or Inf encountered."""


class UndefinedMetricError(BiseqError, ValueError):
    """A metric is undefined for the given labels (e.g. no positives)."""


class UsageError(BiseqError, RuntimeError):
    """An API was called incorrectly."""
