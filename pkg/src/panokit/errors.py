"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyMaskError(ValueError):
    """An operation that needs at least one foreground pixel got none."""


class ProjectionError(ValueError):
    """A view window is degenerate (e.g. field of view >= 180 degrees)."""


class MaskFormatError(ValueError):
    """A mask file failed to parse.

    Carries the byte offset of the first offending byte when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A run configuration failed schema validation."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
