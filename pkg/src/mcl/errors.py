"""Exception hierarchy shared by every module."""


class MCLError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MCLError, ValueError):
    """Input data violates a documented precondition (shape, range, finiteness)."""


class InvalidParameterError(MCLError, ValueError):
    """A scalar hyperparameter is out of its valid range."""


class DegenerateVectorError(InvalidInputError):
    """A zero-norm row was passed where a direction is required."""


class BatchTooSmallError(InvalidInputError):
    pass


class ConfigurationError(MCLError):
    """Invalid configuration: unknown keys, bad values or inconsistent datasets."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [message])


class UnsupportedBackboneError(MCLError):
    pass
