"""Exception types shared across the package.

The CLI maps these onto process exit codes (2, 3 and 4 respectively).
"""


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class NumericError(ArithmeticError):
    """A non-finite value showed up in a forward pass, loss or gradient."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class MissingStageError(RuntimeError):
    """A pipeline stage was invoked before its predecessor produced a checkpoint."""
