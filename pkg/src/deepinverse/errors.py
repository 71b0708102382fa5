"""Exception hierarchy shared by every module."""


class DeepInverseError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DeepInverseError, ValueError):
    """Array shapes are inconsistent with the requested operation."""


class ShapeMismatchError(DimensionError):
    """Stored parameters do not fit the architecture they are loaded into."""

    def __init__(self, layer, message):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class DomainError(DeepInverseError, ValueError):
    """An argument lies outside the domain of the operation."""


class FormatError(DeepInverseError):
    """A file could not be decoded.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset


class NumericError(DeepInverseError, ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    Carries the last parameters whose loss was finite and the log up to the
    failing iteration, so callers can still persist a usable checkpoint.
    """

    def __init__(self, message, params=None, log=None):
        super().__init__(message)
        self.params = params
        self.log = log
