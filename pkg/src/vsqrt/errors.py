"""Exception types shared across the package."""


class VsqrtError(Exception):
    """Base class for all package errors."""


class ValidationError(VsqrtError, ValueError):
    """Invalid parameters, configuration or inputs."""


class NumericalError(VsqrtError, ArithmeticError):
    """A numerical procedure failed; ``diagnostics`` carries details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
