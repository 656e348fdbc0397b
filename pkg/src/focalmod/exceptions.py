"""Exception types shared across the package."""


class FocalModError(Exception):
    """Base class for all package errors."""


class DimensionError(FocalModError, ValueError):
    """Raised when tensor shapes do not line up."""


class ConfigError(FocalModError, ValueError):
    """Raised for invalid or inconsistent configuration."""


class InputError(FocalModError, ValueError):
    """Raised for invalid user inputs (labels, resolutions, files)."""


class NonFiniteError(FocalModError, FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


class GradCheckError(FocalModError):
    """Raised when a gradient check hits a non-finite value."""


class TrainingDivergence(FocalModError, FloatingPointError):
    """Raised when the loss or a gradient becomes non-finite during training."""


class UnsupportedError(FocalModError):
    """Raised when an inspection is requested on a model that cannot provide it."""
