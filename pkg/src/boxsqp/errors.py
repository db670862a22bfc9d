"""Exception hierarchy shared by the solvers and problem instances."""


class SolverError(RuntimeError):
    """Base class for numerical failures."""


class DimensionError(ValueError):
    """Grid functions living on different measure spaces were combined."""


class InvalidExponentError(ValueError):
    pass


class DomainError(SolverError):
    """A point outside the oracle's admissible domain was requested."""


class StateSolveError(SolverError):
    """Newton iteration for a nonlinear state equation failed.

    ``step`` is the time level for evolution problems and ``None`` otherwise.
    """

    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class NonConvergenceError(SolverError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IndefiniteError(SolverError):
    """Negative curvature met in conjugate gradients on the reduced operator."""


class InfeasibleError(SolverError):
    pass


class SetupError(ValueError):
    pass


class ConfigError(ValueError):
    pass
