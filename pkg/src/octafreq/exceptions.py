"""Error types shared across the package.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`VolumeIOError` to exit code 2.
"""


class ValidationError(ValueError):
    """Base class for bad configuration or bad input values."""


class ConfigError(ValidationError):
    """A configuration value is out of its documented domain."""


class ShapeError(ValidationError):
    """An array has the wrong rank, size, or divisibility."""


class DomainError(ValidationError):
    """Input values violate a documented precondition (range, emptiness...)."""


class VolumeIOError(IOError):
    """A volume or checkpoint file is missing, truncated, or malformed."""
