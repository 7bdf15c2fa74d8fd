"""Exception hierarchy shared by every module of the package."""


class LFCError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LFCError, ValueError):
    """Invalid shapes, arguments or run configuration."""


class DegenerateInputError(LFCError, ValueError):
    """Input carries no usable data (empty mask, empty dataset, ...)."""


class ValidationError(LFCError, ValueError):
    """Input violates a numeric precondition (e.g. not a probability map)."""


class UsageError(LFCError, RuntimeError):
    """API called out of order, e.g. backward without a recorded forward."""


class DivergenceError(LFCError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class CheckpointError(LFCError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class PGMError(LFCError, IOError):
    pass


class MalformedHeaderError(PGMError):
    pass


class WrongMaxvalError(PGMError):
    pass


class SizeMismatchError(PGMError):
    pass
