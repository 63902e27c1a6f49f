"""Exception types raised by the fitting machinery."""


class AghqError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(AghqError, ValueError):
    pass


class NotPositiveDefiniteError(AghqError, ArithmeticError):
    """A Cholesky pivot was not strictly positive.

    ``index`` holds the positions (in the leading batch axes) of the
    matrices that failed, when the input was batched.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InnerFailureError(AghqError):
    """Newton's method for a group's random-effect mode did not converge."""

    def __init__(self, message, groups=()):
        super().__init__(message)
        self.groups = tuple(int(g) for g in groups)


class EvaluationError(AghqError):
    """The approximate likelihood could not be evaluated at a trial point."""

    def __init__(self, message, groups=()):
        super().__init__(message)
        self.groups = tuple(int(g) for g in groups)


class LineSearchError(AghqError):
    """Strong-Wolfe line search failed; carries the best point seen so far."""

    def __init__(self, message, x=None, f=None, g=None, state=None):
        super().__init__(message)
        self.x = x
        self.f = f
        self.g = g
        self.state = state


class DataError(AghqError, ValueError):
    pass
