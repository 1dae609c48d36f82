"""Exception hierarchy shared by every module of the engine."""


class IncremadError(Exception):
    """Base class for all errors raised by the engine."""


class ConfigError(IncremadError, ValueError):
    pass


class ShapeError(IncremadError, ValueError):
    pass


class LabelError(IncremadError, ValueError):
    pass


class NumericError(IncremadError, FloatingPointError):
    pass


class StreamError(IncremadError, ValueError):
    pass


class StateError(IncremadError, RuntimeError):
    pass


class MetricError(IncremadError, ValueError):
    pass


class IntegrityError(IncremadError, ValueError):
    pass


class FormatError(IncremadError, ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
