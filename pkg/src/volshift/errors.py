"""Exception hierarchy shared by all volshift modules.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2 and numerical failures exit 3.
"""


class VolshiftError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VolshiftError, ValueError):
    """Tensor or volume extents are incompatible with an operation."""


class PreconditionError(VolshiftError, ValueError):
    """An operation was called outside its documented domain."""


class ConfigError(VolshiftError, ValueError):
    """Invalid configuration value or combination of values."""


class DataError(VolshiftError):
    """Input data cannot be used (empty mask, missing labels, ...)."""


class ParseError(DataError, ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleCheckpointError(DataError):
    """Checkpoint architecture hash does not match the target network."""


class NumericalError(VolshiftError, FloatingPointError):
    """A loss or activation became NaN/Inf during training."""
