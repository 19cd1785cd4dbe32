"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: usage/config problems exit 2,
data and model format problems exit 3, internal invariant violations exit 4.
"""


class TinyCsiError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TinyCsiError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(TinyCsiError):
    """A parameter or configuration value is outside its allowed range."""


class DataError(TinyCsiError):
    """A dataset or model is structurally valid but unusable (e.g. empty)."""


class FormatError(TinyCsiError):
    """A serialized file is malformed. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvariantError(TinyCsiError):
    """An internal consistency check failed; indicates a bug, not bad input."""
