"""Exception hierarchy shared by every module."""


class TRGError(Exception):
    """Base class for all errors raised by trgkd."""


class ConfigError(TRGError, ValueError):
    """A hyperparameter or configuration value is invalid."""


class DimensionError(TRGError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class UsageError(TRGError, ValueError):
    """An API was called with arguments that violate its contract."""


class NumericError(TRGError, ArithmeticError):
    """A NaN, infinity or otherwise invalid number was produced or received."""


class DataParseError(TRGError, ValueError):
    """A dataset or checkpoint file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
