"""Exception hierarchy shared across the package."""


class ResMatchError(Exception):
    """Base class for all package errors."""


class ShapeError(ResMatchError, ValueError):
    """Operand dimensions do not agree."""


class UsageError(ResMatchError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class ConfigError(ResMatchError, ValueError):
    """Invalid configuration value."""


class NumericalError(ResMatchError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ResMatchError, ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""
