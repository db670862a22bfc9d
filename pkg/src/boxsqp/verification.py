"""Independent oracles for testing the solvers.

* ``SyntheticProblem``: a dense problem with ``phi(u) = H u + c + eps sin(u)``
  whose derivatives are exact, so finite differences and SQP runs can be
  checked without any discretization in the way.
* ``brute_force_qp``: exhaustive active-set enumeration for small subproblems.
* ``lipschitz_stability_check``: the bound ``|w1 - w0| <= |b1 - b0| / lambda``
  for minimizers of coercive quadratics over a convex box.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import InfeasibleError, SetupError
from .measure import BoxBounds, GridFunction, MeasureSpace, weighted_norm
from .problem import LagrangeNewtonOracle, Linearization
from .qp import QpInstance

MAX_BRUTE_FORCE = 16


@dataclass(eq=False)
class SyntheticProblem(LagrangeNewtonOracle):
    """Smooth part ``j(u) = 1/2 <H u, u> + <c, u> + eps sum w (1 - cos u)``.

    ``H`` is self-adjoint in the weighted inner product.  ``coercivity`` is a
    lower bound for the spectrum of ``kappa + phi'(u)`` valid for every ``u``.
    """

    space: MeasureSpace
    H: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    epsilon: float
    kappa: float
    box: BoxBounds
    coercivity: float

    def control_space(self) -> MeasureSpace:
        return self.space

    def bounds(self) -> BoxBounds:
        return self.box

    def objective(self, u: GridFunction) -> float:
        x, w = u.values, self.space.weights
        val = 0.5 * np.dot(w * (self.H @ x), x) + np.dot(w * self.c, x)
        return float(val + self.epsilon * np.dot(w, 1.0 - np.cos(x)))

    def phi(self, u: GridFunction) -> GridFunction:
        x = u.values
        return self.space.function(self.H @ x + self.c + self.epsilon * np.sin(x))

    def apply_phi_prime(self, u: GridFunction, v: GridFunction) -> GridFunction:
        return self.space.function(self.H @ v.values + self.epsilon * np.cos(u.values) * v.values)

    def phi_prime_matrix(self, u: GridFunction) -> np.ndarray:
        return self.H + np.diag(self.epsilon * np.cos(u.values))

    # there is no state: the Lagrange-Newton method reduces to the SQP method
    def zero_iterate(self):
        return np.zeros(0), np.zeros(0)

    def state_and_adjoint(self, u: GridFunction):
        return self.zero_iterate()

    def linearize(self, u: GridFunction, state=None, adjoint=None) -> Linearization:
        return _SyntheticLinearization(self, u)


class _SyntheticLinearization(Linearization):
    def __init__(self, prob: SyntheticProblem, u: GridFunction):
        self.prob, self.control = prob, u
        self.gradient_term = prob.phi(u)

    def apply_hessian(self, v: GridFunction) -> GridFunction:
        return self.prob.apply_phi_prime(self.control, v)

    def advance(self, step: GridFunction):
        return self.prob.zero_iterate()

    def model_objective(self) -> float:
        return self.prob.objective(self.control)


def make_synthetic(seed: int, n: int, spectrum=(0.0, 2.0), epsilon: float = 0.0, kappa: float = 1.0,
                   bounds: BoxBounds | None = None, c_scale: float = 2.0) -> SyntheticProblem:
    """Random synthetic problem.

    ``spectrum`` is either a ``(low, high)`` tuple for eigenvalues drawn
    uniformly in that range or an array of ``n`` eigenvalues.  Weights are drawn
    in [0.5, 1.5], so the space is a genuinely weighted one.
    """
    if n < 1 or n > 64:
        raise SetupError("synthetic problems need 1 <= n <= 64")
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, n)
    if isinstance(spectrum, tuple) and len(spectrum) == 2:
        eig = rng.uniform(spectrum[0], spectrum[1], n)
    elif np.shape(spectrum) == (n,):
        eig = np.asarray(spectrum, dtype=float)
    else:
        raise SetupError("spectrum must be (low, high) or n eigenvalues")
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = (q * eig) @ q.T
    s = 0.5 * (s + s.T)
    sw = np.sqrt(w)
    H = s * sw[None, :] / sw[:, None]  # W^{-1/2} S W^{1/2}: self-adjoint in the weighted product
    c = c_scale * rng.standard_normal(n)
    bounds = BoxBounds(-1.0, 1.0) if bounds is None else bounds
    lam = kappa + float(eig.min()) - abs(epsilon)
    return SyntheticProblem(MeasureSpace(w), H, c, float(epsilon), float(kappa), bounds, lam)


def dense_operator(q: QpInstance) -> np.ndarray:
    """Matrix of ``v -> kappa v + H v`` built column by column."""
    n = q.space.point_count
    cols = [q.kappa * e + q.apply(e) for e in np.eye(n)]
    return np.stack(cols, axis=1)


def brute_force_qp(q: QpInstance) -> GridFunction:
    """Global minimizer (as a step from the base point) by active-set enumeration.

    Free sets are enumerated explicitly; for each one every lower/upper
    assignment of the remaining points is solved in a single batched solve.
    A candidate is kept when it is feasible and its multipliers have the
    right signs.  Free blocks that are not positive definite are skipped.
    """
    n = q.space.point_count
    if n > MAX_BRUTE_FORCE:
        raise SetupError(f"brute force is limited to {MAX_BRUTE_FORCE} points")
    w = q.space.weights
    x = q.base_point.values
    lo = np.broadcast_to(q.bounds.lower - x, (n,)).astype(float)
    up = np.broadcast_to(q.bounds.upper - x, (n,)).astype(float)
    M = w[:, None] * dense_operator(q)
    M = 0.5 * (M + M.T)
    g = w * q.linear_term.values
    scale = max(1.0, np.max(np.abs(M)), np.max(np.abs(g)))
    ends = np.abs(np.concatenate([lo, up]))
    tol = 1e-9 * scale * max(1.0, np.max(ends[np.isfinite(ends)], initial=1.0))

    best_val, best = np.inf, None
    for free_bits in itertools.product((False, True), repeat=n):
        free = np.array(free_bits)
        act = np.flatnonzero(~free)
        fidx = np.flatnonzero(free)
        # all lower/upper assignments of the active points, one column each
        choices = ((np.arange(2 ** act.size)[:, None] >> np.arange(act.size)) & 1).astype(bool)
        va = np.where(choices, up[act], lo[act])  # (k, |A|)
        finite = np.all(np.isfinite(va), axis=1)
        if not finite.any():
            continue
        va = va[finite]
        V = np.zeros((va.shape[0], n))
        V[:, act] = va
        if fidx.size:
            Mff = M[np.ix_(fidx, fidx)]
            try:
                chol = sla.cho_factor(Mff)
            except np.linalg.LinAlgError:
                continue
            rhs = -(g[fidx][:, None] + M[np.ix_(fidx, act)] @ va.T)
            V[:, fidx] = sla.cho_solve(chol, rhs).T
            feas = np.all((V[:, fidx] >= lo[fidx] - tol) & (V[:, fidx] <= up[fidx] + tol), axis=1)
        else:
            feas = np.ones(V.shape[0], bool)
        grad = V @ M + g  # M symmetric
        at_up = choices[finite]
        ga = grad[:, act]
        stat = np.all(np.where(at_up, ga <= tol, ga >= -tol), axis=1)
        ok = feas & stat
        if not ok.any():
            continue
        cand = V[ok]
        vals = 0.5 * np.einsum("ki,ij,kj->k", cand, M, cand) + cand @ g
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best = vals[k], cand[k]
    if best is None:
        raise InfeasibleError("no feasible stationary active-set pattern (operator indefinite?)")
    return q.space.function(np.clip(best, lo, up))


def _masked_instance(s: SyntheticProblem, b: np.ndarray, bounds: BoxBounds, idx: np.ndarray) -> QpInstance:
    space = MeasureSpace(s.space.weights[idx])
    Hm = s.H[np.ix_(idx, idx)]
    zero = space.zeros()
    return QpInstance(space, zero, s.kappa, bounds, space.function(b[idx]),
                      lambda v: space.function(Hm @ v.values))


def masked_coercivity(s: SyntheticProblem, free_mask: np.ndarray) -> float:
    """Smallest eigenvalue of ``kappa + H`` restricted to the masked points."""
    idx = np.flatnonzero(free_mask)
    w = s.space.weights[idx]
    A = w[:, None] * (s.kappa * np.eye(idx.size) + s.H[np.ix_(idx, idx)])
    return float(sla.eigh(0.5 * (A + A.T), np.diag(w), eigvals_only=True)[0])


def lipschitz_stability_check(s: SyntheticProblem, b0, b1, bounds: BoxBounds, free_mask,
                              lam: float | None = None):
    """Check ``|w1 - w0| <= |b1 - b0| / lam`` for the two masked minimizers.

    ``w_i`` minimizes ``1/2 <(kappa + H) w, w> + <b_i, w>`` over points of the
    box supported on ``free_mask``.  ``lam`` defaults to ``s.coercivity`` and
    is verified against an eigensolve.  Returns ``(lhs, rhs, passed)``.
    """
    free_mask = np.asarray(free_mask, bool)
    idx = np.flatnonzero(free_mask)
    if idx.size == 0:
        raise SetupError("free mask is empty")
    if np.any(np.asarray(bounds.lower) > 0) or np.any(np.asarray(bounds.upper) < 0):
        raise SetupError("the box must contain zero")
    lam = s.coercivity if lam is None else lam
    if not lam > 0:
        raise SetupError("lambda must be positive")
    smallest = masked_coercivity(s, free_mask)
    if smallest < lam * (1.0 - 1e-12):
        raise SetupError(f"claimed lambda {lam:.6g} exceeds smallest eigenvalue {smallest:.6g}")
    b0 = np.asarray(b0, float)
    b1 = np.asarray(b1, float)
    w0 = brute_force_qp(_masked_instance(s, b0, bounds, idx))
    w1 = brute_force_qp(_masked_instance(s, b1, bounds, idx))
    lhs = weighted_norm(w1 - w0, 2)
    rhs = weighted_norm(MeasureSpace(s.space.weights[idx]).function((b1 - b0)[idx]), 2) / lam
    return lhs, rhs, bool(lhs <= rhs * (1.0 + 1e-8))
