"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: argument problems exit 1,
configuration/input problems (ConfigError and subclasses) exit 2, and
numerical or state failures exit 3.
"""


class PatError(Exception):
    """Base class for package errors."""


class ShapeError(PatError):
    """Operand dimensions incompatible with an operation."""


class ConfigError(PatError):
    """Invalid configuration, request, or input data."""


class FormatError(ConfigError):
    """Malformed tensor-container bytes; carries the offending offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(ConfigError):
    """The retrieval protocol cannot be applied to the given data."""


class NumericalError(PatError):
    """Non-finite values or a failed numerical check."""


class StateError(PatError):
    """Operation requires state that was not retained or initialized."""
