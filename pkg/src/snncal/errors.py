"""Exception types shared across the package."""


class SnnCalError(Exception):
    """Base class for all package errors."""


class DimensionError(SnnCalError, ValueError):
    pass


class StructureError(SnnCalError, ValueError):
    pass


class TrainingError(SnnCalError, RuntimeError):
    pass


class ThresholdError(SnnCalError, ValueError):
    pass


class CalibrationError(SnnCalError, RuntimeError):
    pass


class FormatError(SnnCalError, ValueError):
    """Malformed binary or JSON input. ``offset`` is the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(SnnCalError, ValueError):
    pass
