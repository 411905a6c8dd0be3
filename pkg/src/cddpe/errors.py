"""Exception hierarchy shared across the package."""


class CddpeError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CddpeError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(CddpeError):
    """A configuration value is invalid or inconsistent."""


class UsageError(CddpeError):
    """An API was called in an unsupported way."""


class FormatError(CddpeError):
    """A serialized file is malformed or truncated."""


class TrainingDiverged(CddpeError):
    """Training produced a non-finite loss or gradient."""
