"""Exception hierarchy shared by all modules."""


class DampOptError(Exception):
    """Base class for all package errors."""


class ConstructionError(DampOptError, ValueError):
    """Invalid system data (non-SPD matrices, bad shapes, bad bounds)."""


class EigenSolverError(DampOptError):
    def __init__(self, message, mode=None):
        super().__init__(message)
        self.mode = mode


class StabilityError(DampOptError):
    """An operator that must be Hurwitz has an eigenvalue with Re >= 0."""

    def __init__(self, message, g=None):
        super().__init__(message)
        self.g = g


class CapacityError(DampOptError):
    """Problem dimension above the configured dense cap."""


class NumericalBreakdown(DampOptError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DivergenceError(DampOptError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class AccuracyError(DampOptError):
    """Quadrature could not reach the requested accuracy."""


class ConvergenceError(DampOptError):
    """An outer loop (offline phase, restarts) failed to converge."""


class StartFailure(DampOptError):
    """Objective is +inf on every vertex of the initial simplex."""
