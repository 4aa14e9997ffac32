"""Exception hierarchy shared by every module."""


class EclipseError(Exception):
    """Base class; ``layer_index`` is filled in when the failure is tied to a layer."""

    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class DimensionMismatch(EclipseError, ValueError):
    pass


class EmptyOutput(EclipseError, ValueError):
    pass


class FormatError(EclipseError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ChecksumMismatch(FormatError):
    pass


class InvalidShape(EclipseError, ValueError):
    pass


class RankDeficient(EclipseError):
    pass


class NotEligible(EclipseError, TypeError):
    """The targeted layer kind cannot be transformed by the requested operation."""


class NotLinear(NotEligible):
    pass


class NotConv(NotEligible):
    pass


class NoSuccessor(EclipseError):
    pass


class EmptyInput(EclipseError, ValueError):
    pass


class WindowTooLarge(EclipseError, ValueError):
    pass


class SeriesTooShort(EclipseError, ValueError):
    pass


class LengthMismatch(EclipseError, ValueError):
    pass


class FailedToConverge(EclipseError):
    pass
