"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class InvRenderError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(InvRenderError, ValueError):
    """Bad argument, shape, or data invariant."""

    exit_code = 1


class ShapeError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class StageGateError(ValidationError):
    """A training stage was started without its prerequisite artifacts."""


class DataIOError(InvRenderError, OSError):
    exit_code = 2


class NumericError(InvRenderError, ArithmeticError):
    exit_code = 3
