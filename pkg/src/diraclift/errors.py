"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure mode raised by
library code should be (a subclass of) one of the classes below.
"""


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration / command usage."""


class DataValidationError(ValueError):
    """Persisted data failed a load-time invariant (schema, grid, gauge)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (non-finite values, singular systems)."""


class SingularGramError(NumericalError):
    """Constraint Gram matrix J_c M^-1 J_c^T lost rank; no pseudo-inverse is taken."""


class NoConvergenceError(NumericalError):
    """Iterative solver did not reach tolerance."""

    def __init__(self, message, residual=None, iterations=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.step = step
