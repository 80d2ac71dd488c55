"""Exception types shared across the package."""


class EFGPError(Exception):
    """Base class for package errors."""


class ParameterError(EFGPError, ValueError):
    """An argument is outside the range where a rule or formula applies."""


class PreconditionError(ParameterError):
    """A theorem hypothesis needed by an error bound does not hold."""


class ResourceError(EFGPError, MemoryError):
    """A size guard was exceeded."""


class ConvergenceError(EFGPError, RuntimeError):
    """Conjugate gradients did not reach the requested residual.

    ``history`` holds the relative residual after each iteration.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
