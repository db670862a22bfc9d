"""Box-constrained quadratic subproblems.

The subproblem at an iterate ``x`` is

    min_v  1/2 [kappa <v, v> + <H v, v>] + <kappa x + phi(x), v>
    s.t.   lower <= x + v <= upper,

with all pairings in the weighted L2 inner product and ``H`` available only as
an action.  Its solution is characterized by the fixed point

    x + v = P_[lower, upper](-(H v + phi(x)) / kappa).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import IndefiniteError, NonConvergenceError, SetupError
from .measure import ActiveSetPartition, BoxBounds, GridFunction, MeasureSpace
from .problem import Linearization, ProblemOracle

log = logging.getLogger(__name__)

_PG_FALLBACK_STEPS = 5


@dataclass
class QpInstance:
    space: MeasureSpace
    base_point: GridFunction
    kappa: float
    bounds: BoxBounds
    linear_term: GridFunction
    hessian: Callable[[GridFunction], GridFunction] = field(repr=False)
    applications: int = 0

    def __post_init__(self):
        if not self.kappa > 0:
            raise SetupError("kappa must be positive")

    @classmethod
    def from_oracle(cls, oracle: ProblemOracle, kappa: float, u: GridFunction) -> QpInstance:
        lin = oracle.phi(u) + kappa * u
        return cls(u.space, u, kappa, oracle.bounds(), lin, lambda v: oracle.apply_phi_prime(u, v))

    @classmethod
    def from_linearization(cls, lin: Linearization, kappa: float, bounds: BoxBounds) -> QpInstance:
        u = lin.control
        return cls(u.space, u, kappa, bounds, lin.gradient_term + kappa * u, lin.apply_hessian)

    @property
    def phi_base(self) -> np.ndarray:
        return self.linear_term.values - self.kappa * self.base_point.values

    def apply(self, v: np.ndarray) -> np.ndarray:
        self.applications += 1
        return self.hessian(self.space.function(v)).values

    def fixed_point_residual(self, v: np.ndarray, hv: np.ndarray | None = None) -> float:
        hv = self.apply(v) if hv is None else hv
        target = np.clip(-(hv + self.phi_base) / self.kappa, self.bounds.lower, self.bounds.upper)
        return float(np.max(np.abs(self.base_point.values + v - target)))


@dataclass
class QpResult:
    step: GridFunction
    ssn_iterations: int
    final_active_sets: ActiveSetPartition
    fixed_point_residual: float
    cg_iterations: int = 0
    control: GridFunction | None = None  # base_point + step with exact bound values


def qp_objective(q: QpInstance, v: GridFunction) -> float:
    w = q.space.weights
    hv = q.apply(v.values)
    quad = q.kappa * np.dot(w * v.values, v.values) + np.dot(w * hv, v.values)
    return float(0.5 * quad + np.dot(w * q.linear_term.values, v.values))


def weighted_cg(apply, b, weights, tol, max_iters):
    """Conjugate gradients in the inner product ``<a, b> = sum w a b``.

    ``apply`` must be self-adjoint in that inner product.  Stops once the
    weighted residual norm drops below ``tol`` times that of ``b``.
    """
    x = np.zeros_like(b)
    r = b.copy()
    rr = np.dot(weights * r, r)
    bnorm = np.sqrt(rr)
    if bnorm == 0.0:
        return x, 0
    p = r.copy()
    for k in range(1, max_iters + 1):
        ap = apply(p)
        pap = np.dot(weights * p, ap)
        if not pap > 0.0:
            raise IndefiniteError(f"nonpositive curvature {pap:.3e} in CG iteration {k}")
        a = rr / pap
        x += a * p
        r -= a * ap
        rr_new = np.dot(weights * r, r)
        if np.sqrt(rr_new) <= tol * bnorm:
            return x, k
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise NonConvergenceError(
        f"CG did not reach relative residual {tol:g} in {max_iters} iterations",
        residual=float(np.sqrt(rr) / bnorm),
    )


def _lipschitz_estimate(q: QpInstance, iters=30, seed=0):
    """Upper estimate of the largest eigenvalue of kappa + H (power iteration)."""
    w = q.space.weights
    x = np.random.default_rng(seed).standard_normal(q.space.point_count)
    x /= np.sqrt(np.dot(w * x, x))
    lam = q.kappa
    for _ in range(iters):
        y = q.kappa * x + q.apply(x)
        lam = np.sqrt(np.dot(w * y, y))
        if lam == 0.0:
            break
        x = y / lam
    return 1.1 * max(lam, q.kappa)


def _pg_step(q: QpInstance, v, hv, step):
    x = q.base_point.values
    g = q.kappa * (x + v) + hv + q.phi_base
    u = np.clip(x + v - step * g, q.bounds.lower, q.bounds.upper)
    return u - x


def _masks(cand, bounds):
    lower = cand <= bounds.lower
    upper = (cand >= bounds.upper) & ~lower
    return lower, upper


def solve_ssn(q: QpInstance, v_init: GridFunction | None = None, tol: float = 1e-12,
              max_iters: int = 50, cg_tol: float = 1e-12, cg_max_iters: int | None = None) -> QpResult:
    """Primal-dual active set (semismooth Newton) method for the subproblem.

    Each iteration fixes the active points at their bounds, solves the
    reduced system on the free points by weighted CG, and re-classifies points
    through the projection formula.  Stops when the active sets repeat and the
    fixed-point residual is below ``tol``.
    """
    x = q.base_point.values
    lo, up = q.bounds.lower, q.bounds.upper
    kappa, w = q.kappa, q.space.weights
    phi = q.phi_base
    v = np.zeros_like(x) if v_init is None else v_init.values.copy()
    v = np.clip(x + v, lo, up) - x

    hv = q.apply(v)
    lower, upper = _masks(-(hv + phi) / kappa, q.bounds)
    seen: dict[bytes, float] = {}
    cg_total = 0
    residual = np.inf
    step_pg = None

    for it in range(1, max_iters + 1):
        free = ~(lower | upper)
        u = x + v
        u[lower] = lo
        u[upper] = up
        dv = (u - x) - v
        if np.any(dv):
            hv = hv + q.apply(dv)
            v = u - x

        nfree = int(free.sum())
        if nfree:
            def reduced(p, free=free):
                full = np.zeros_like(x)
                full[free] = p
                return kappa * p + q.apply(full)[free]

            rhs = -(kappa * u + hv + phi)[free]
            cap = cg_max_iters or 10 * nfree
            delta, k = weighted_cg(reduced, rhs, w[free], cg_tol, cap)
            cg_total += k
            if np.any(delta):
                full = np.zeros_like(x)
                full[free] = delta
                v = v + full
                hv = q.apply(v)

        cand = -(hv + phi) / kappa
        residual = float(np.max(np.abs(x + v - np.clip(cand, lo, up))))
        new_lower, new_upper = _masks(cand, q.bounds)
        same = np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper)
        log.debug("ssn it %d: free=%d residual=%.3e", it, nfree, residual)
        if same and residual <= tol:
            break

        key = new_lower.tobytes() + new_upper.tobytes()
        if not same and key in seen and residual >= seen[key]:
            # pattern cycling: take a few projected-gradient steps, then resume
            log.debug("ssn cycling detected, projected-gradient fallback")
            if step_pg is None:
                step_pg = 1.0 / _lipschitz_estimate(q)
            for _ in range(_PG_FALLBACK_STEPS):
                v = _pg_step(q, v, hv, step_pg)
                hv = q.apply(v)
            new_lower, new_upper = _masks(-(hv + phi) / kappa, q.bounds)
        seen[key] = residual
        lower, upper = new_lower, new_upper
    else:
        raise NonConvergenceError(
            f"semismooth Newton stopped after {max_iters} iterations", residual=residual
        )

    u = np.clip(x + v, lo, up)
    u[lower] = lo
    u[upper] = up
    return QpResult(
        step=q.space.function(u - x),
        ssn_iterations=it,
        final_active_sets=ActiveSetPartition.from_masks(lower, upper),
        fixed_point_residual=residual,
        cg_iterations=cg_total,
        control=q.space.function(u),
    )


def solve_projected_gradient(q: QpInstance, tol: float = 1e-10, max_iters: int = 100000) -> GridFunction:
    """Projected gradient with constant step ``1/L``; independent of the SSN path."""
    x = q.base_point.values
    step = 1.0 / _lipschitz_estimate(q)
    v = np.zeros_like(x)
    hv = np.zeros_like(x)
    residual = np.inf
    for _ in range(max_iters):
        residual = q.fixed_point_residual(v, hv)
        if residual <= tol:
            return q.space.function(v)
        v = _pg_step(q, v, hv, step)
        hv = q.apply(v)
    raise NonConvergenceError(
        f"projected gradient stopped after {max_iters} iterations", residual=residual
    )
