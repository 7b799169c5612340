"""Exception types shared across the package."""


class PNetError(Exception):
    """Base class for all package errors."""


class ShapeError(PNetError, ValueError):
    """An array does not have the shape an operation requires."""


class ParameterError(PNetError, ValueError):
    """A scalar parameter is out of range (negative sigma, frac_bits >= bits...)."""


class FormatError(PNetError, ValueError):
    """A file is malformed.  ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(PNetError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(PNetError, ValueError):
    """An experiment or training configuration is invalid."""
