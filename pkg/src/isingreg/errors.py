"""Exception hierarchy shared by every module of the package."""


class IsingRegError(Exception):
    """Base class for all package errors."""


class DimensionError(IsingRegError, ValueError):
    """Operand shapes do not agree."""


class NumericError(IsingRegError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class ParameterError(IsingRegError, ValueError):
    """A distribution or operator parameter is outside its domain."""


class ConfigError(IsingRegError, ValueError):
    """Invalid model, training or experiment configuration."""


class DataError(IsingRegError, ValueError):
    """Labels or targets out of range."""


class FormatError(IsingRegError, ValueError):
    """A data or checkpoint file does not follow its binary layout."""


class StateError(IsingRegError, RuntimeError):
    """An operation was called on stale or incomplete state."""


class TrainingError(IsingRegError, RuntimeError):
    """Training produced a non-finite loss or curvature."""


class DataIOError(IsingRegError, OSError):
    """A data file is missing or truncated."""
