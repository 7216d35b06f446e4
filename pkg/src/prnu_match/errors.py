"""Exception types shared by all modules."""


class PrnuMatchError(Exception):
    """Base class for every error raised by this package."""


class IoError(PrnuMatchError):
    """File missing, unreadable, or truncated."""


class FormatError(PrnuMatchError):
    """Unsupported or malformed file/container format."""


class DimensionError(PrnuMatchError):
    """Array shapes incompatible with the requested operation."""


class DegenerateInputError(PrnuMatchError):
    """Input carries no usable signal (constant array, zero energy)."""


class ConfigError(PrnuMatchError):
    """Invalid parameter or configuration value."""


class EmptyInputError(PrnuMatchError):
    """An operation received an empty collection."""


class DuplicateError(PrnuMatchError):
    """A unique key was inserted twice."""


class NumericError(PrnuMatchError):
    """A numeric computation produced NaN/Inf and was aborted."""
