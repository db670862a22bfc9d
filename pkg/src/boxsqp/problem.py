"""Abstract problem interface and generic derivative diagnostics.

A problem is ``min J(u) = j(u) + kappa/2 ||u||^2`` over a box, where the smooth
part ``j`` is available through an oracle providing its value, the pointwise
representative ``phi(u)`` of its derivative, and the action of ``phi'(u)``.
"""

from __future__ import annotations

import enum
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SetupError, SolverError
from .measure import BoxBounds, GridFunction, MeasureSpace, project_box, weighted_inner, weighted_norm


class Method(str, enum.Enum):
    SQPNLN = "sqpnln"
    SQPLIN = "sqplin"


@dataclass(frozen=True)
class SqpConfig:
    kappa: float
    stop_tol: float = 5e-13
    max_outer_iters: int = 30
    qp_tol: float = 1e-12
    qp_max_iters: int = 50
    cg_tol: float = 1e-12
    cg_max_iters: int | None = None  # None: 10 x number of free points
    method: Method = Method.SQPNLN

    def __post_init__(self):
        if not self.kappa > 0:
            raise SetupError("kappa must be positive")
        for name in ("stop_tol", "qp_tol", "cg_tol"):
            if not getattr(self, name) > 0:
                raise SetupError(f"{name} must be positive")
        if self.max_outer_iters < 1 or self.qp_max_iters < 1:
            raise SetupError("iteration caps must be positive")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise SetupError("cg_max_iters must be positive")
        object.__setattr__(self, "method", Method(self.method))


class ProblemOracle(ABC):
    """Smooth part of the objective with first and second derivative access.

    Implementations may cache PDE solutions for the most recent control, so an
    instance must not be shared between concurrent solves.
    """

    @abstractmethod
    def control_space(self) -> MeasureSpace: ...

    @abstractmethod
    def bounds(self) -> BoxBounds: ...

    @abstractmethod
    def objective(self, u: GridFunction) -> float: ...

    @abstractmethod
    def phi(self, u: GridFunction) -> GridFunction: ...

    @abstractmethod
    def apply_phi_prime(self, u: GridFunction, v: GridFunction) -> GridFunction: ...


class Linearization(ABC):
    """Quadratic model of the problem around an iterate.

    ``gradient_term`` plays the role of ``phi(u_n)`` and ``apply_hessian`` the
    role of ``phi'(u_n)``.  For the control-reduced method both are exact; for
    the Lagrange-Newton method they are built from independent state and
    adjoint iterates, and ``advance`` returns the updated pair.
    """

    control: GridFunction
    gradient_term: GridFunction

    @abstractmethod
    def apply_hessian(self, v: GridFunction) -> GridFunction: ...

    @abstractmethod
    def advance(self, step: GridFunction):
        """Return the (state, adjoint) iterates after the control step."""

    @abstractmethod
    def model_objective(self) -> float:
        """Smooth objective evaluated on the current state iterate."""


class LagrangeNewtonOracle(ProblemOracle):
    """Oracle that also exposes linearizations at independent (y, adjoint)."""

    @abstractmethod
    def linearize(self, u: GridFunction, state=None, adjoint=None) -> Linearization:
        """Linearization at ``u``; with ``state=None`` the exact reduced one."""

    @abstractmethod
    def zero_iterate(self):
        """(state, adjoint) pair of zeros in this instance's layout."""

    @abstractmethod
    def state_and_adjoint(self, u: GridFunction):
        """(y_u, adjoint_u) from a nonlinear state solve and a linear adjoint solve."""


@dataclass(frozen=True)
class FullObjective:
    oracle: ProblemOracle
    kappa: float

    def value(self, u: GridFunction) -> float:
        return self.oracle.objective(u) + 0.5 * self.kappa * weighted_norm(u, 2) ** 2

    __call__ = value


def gradient(oracle: ProblemOracle, kappa: float, u: GridFunction) -> GridFunction:
    """F(u) = phi(u) + kappa u."""
    return oracle.phi(u) + kappa * u


def kkt_residual(oracle: ProblemOracle, kappa: float, u: GridFunction) -> float:
    """L-inf distance between u and the projection of -phi(u)/kappa."""
    if not kappa > 0:
        raise SetupError("kappa must be positive")
    target = project_box(-oracle.phi(u) / kappa, oracle.bounds())
    return weighted_norm(u - target, np.inf)


def _guarded(fn, *args):
    try:
        value = fn(*args)
    except SolverError as exc:
        raise DomainError(f"perturbed point is not admissible: {exc}") from exc
    return value


def fd_gradient_check(oracle: ProblemOracle, u, v, steps, objective=None, derivative=None):
    """Central differences of the objective against the derivative pairing.

    Defaults check the smooth part against ``phi``; pass ``objective`` and
    ``derivative`` (a GridFunction) to check e.g. the full objective instead.
    Returns a list of ``(step, error)`` pairs.
    """
    objective = oracle.objective if objective is None else objective
    g = oracle.phi(u) if derivative is None else derivative
    exact = weighted_inner(g, v)
    out = []
    for h in steps:
        jp = _guarded(objective, u + h * v)
        jm = _guarded(objective, u - h * v)
        out.append((h, abs((jp - jm) / (2 * h) - exact)))
    return out


def fd_hessian_check(oracle: ProblemOracle, u, v, w, steps):
    exact = weighted_inner(oracle.apply_phi_prime(u, w), v)
    out = []
    for h in steps:
        gp = _guarded(oracle.phi, u + h * w)
        gm = _guarded(oracle.phi, u - h * w)
        out.append((h, abs(weighted_inner(gp - gm, v) / (2 * h) - exact)))
    return out


def symmetry_defect(oracle: ProblemOracle, u, v, w) -> float:
    if v is w or np.array_equal(v.values, w.values):
        return 0.0
    a = weighted_inner(oracle.apply_phi_prime(u, v), w)
    b = weighted_inner(oracle.apply_phi_prime(u, w), v)
    return abs(a - b)
