"""Semilinear parabolic problem with bilinear (Robin coefficient) boundary control.

    min  1/2 ||y_u - y_d||^2_{L2(Q)} + kappa/2 ||u||^2_{L2(Sigma)},  alpha <= u <= beta,
    dy/dt - Delta y + f(x, t, y) = 0,   dy/dn + u y = g on the boundary,  y(0) = y0.

Space: P1 on a Kuhn mesh with all nodes as unknowns.  Time: implicit Euler
(dG(0)) with ``M = 2**N`` steps.  The control is P1 on the boundary and
constant on each time step; boundary integrals use the lumped boundary mass
``m_b``, so the control lattice is (step, boundary node) with weights
``tau * m_b``.

The discrete state equation of step k, scaled by tau, is

    E_k = M (y^k - y^{k-1}) + tau (K y^k + F_k(y^k) + D(m u^k) y^k - G_k) = 0,

and every derivative below is an exact derivative of this discrete system.
Adjoint trajectories store the multiplier of step k at index ``k - 1`` and
the terminal zero at index ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import SetupError, StateSolveError
from .fem import Assembler, SimplexMesh, factorize, lumped_boundary_mass, newton_solve, unit_cube_mesh
from .measure import BoxBounds, GridFunction, MeasureSpace
from .problem import LagrangeNewtonOracle, Linearization

STATE_TOL = 1e-12
MAX_NEWTON = 50


@dataclass(frozen=True)
class ParabolicData:
    """``f, df, d2f: (x, t, y) -> array`` with df >= C_f; ``g, yd: (x, t)``; ``y0: x``."""

    f: Callable
    df: Callable
    d2f: Callable
    g: Callable
    y0: Callable
    yd: Callable
    a0: float = 0.0


def _bump(x):
    return np.prod(8.0 * x * (1.0 - x), axis=-1)


def cubic_bilinear_data() -> ParabolicData:
    """f = y^3 - y, g = 1, y0 = prod 8 x_i (1 - x_i), y_d = y0 cos(pi t)."""
    return ParabolicData(
        f=lambda x, t, y: y ** 3 - y,
        df=lambda x, t, y: 3.0 * y ** 2 - 1.0,
        d2f=lambda x, t, y: 6.0 * y,
        g=lambda x, t: np.ones(x.shape[:-1]),
        y0=_bump,
        yd=lambda x, t: _bump(x) * np.cos(np.pi * t),
    )


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    mesh: SimplexMesh
    horizon: float
    steps: int
    boundary_nodes: np.ndarray
    boundary_mass: np.ndarray  # lumped, per boundary node

    @property
    def tau(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.steps + 1)

    def control_space(self) -> MeasureSpace:
        return MeasureSpace(np.tile(self.tau * self.boundary_mass, self.steps))


def space_time_grid(dim: int, refinement: int, horizon: float) -> SpaceTimeGrid:
    """Uniform mesh with h = 2^-N and M = 2^N implicit Euler steps."""
    if not horizon > 0:
        raise SetupError("time horizon must be positive")
    mesh = unit_cube_mesh(dim, refinement)
    m = lumped_boundary_mass(mesh)
    nodes = np.flatnonzero(mesh.boundary)
    return SpaceTimeGrid(mesh, float(horizon), 2 ** refinement, nodes, m[nodes])


class ParabolicProblem(LagrangeNewtonOracle):
    def __init__(self, grid: SpaceTimeGrid, data: ParabolicData, bounds: BoxBounds):
        self.grid, self.data, self._bounds = grid, data, bounds
        mesh = grid.mesh
        self.asm = Assembler(mesh)
        self.n = mesh.n_nodes
        self.M = self.asm.mass()
        self.K = self.asm.stiffness()
        if data.a0:
            self.K = self.K + data.a0 * self.M
        self.space = grid.control_space()
        self.nb = grid.boundary_nodes.size
        self.mfull = np.zeros(self.n)
        self.mfull[grid.boundary_nodes] = grid.boundary_mass
        self.xq = self.asm.qp_points
        tau, times = grid.tau, grid.times
        pts = mesh.points
        self.y_init = data.y0(pts)
        # per step k = 1..M (row k-1): lumped boundary load, tracking load and constant
        self.G = np.stack([self.mfull * data.g(pts, t) for t in times[1:]])
        self.bd = np.empty((grid.steps, self.n))
        self.cd = np.empty(grid.steps)
        for k, t in enumerate(times[1:]):
            ydq = data.yd(self.xq, t)
            self.bd[k] = self.asm.load(ydq)
            self.cd[k] = self.asm.integrate(ydq ** 2)
        self._key = None
        self._traj = None
        self._lus = None
        self._lin = None

    # --- layout helpers ------------------------------------------------------
    def steps_view(self, u: GridFunction | np.ndarray) -> np.ndarray:
        vals = u.values if isinstance(u, GridFunction) else u
        return vals.reshape(self.grid.steps, self.nb)

    def boundary_field(self, row: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n)
        full[self.grid.boundary_nodes] = row
        return full

    def _t(self, k: int) -> float:
        return self.grid.times[k]

    # --- ProblemOracle -----------------------------------------------------------
    def control_space(self) -> MeasureSpace:
        return self.space

    def bounds(self) -> BoxBounds:
        return self._bounds

    def objective(self, u: GridFunction) -> float:
        ys, _ = self._march(u)
        return self.tracking(ys)

    def phi(self, u: GridFunction) -> GridFunction:
        return self.linearize(u).gradient_term

    def apply_phi_prime(self, u: GridFunction, v: GridFunction) -> GridFunction:
        return self.linearize(u).apply_hessian(v)

    # --- Lagrange-Newton support ---------------------------------------------
    def zero_iterate(self):
        steps = self.grid.steps
        ys = np.zeros((steps + 1, self.n))
        ys[0] = self.y_init
        return ys, np.zeros((steps + 1, self.n))

    def state_and_adjoint(self, u: GridFunction):
        lin = self.linearize(u)
        return lin.ys.copy(), lin.lams.copy()

    def linearize(self, u: GridFunction, state=None, adjoint=None) -> Linearization:
        if state is None:
            ys, lus = self._march(u)
            if self._lin is None:
                self._lin = _ParabolicLinearization(self, u, ys, None, lus)
            return self._lin
        ys = np.array(state, float)
        ys[0] = self.y_init
        return _ParabolicLinearization(self, u, ys, np.asarray(adjoint, float), None)

    # --- discrete operators ------------------------------------------------------
    def tracking(self, ys: np.ndarray) -> float:
        total = 0.0
        for k in range(1, self.grid.steps + 1):
            y = ys[k]
            total += 0.5 * (y @ (self.M @ y) - 2.0 * y @ self.bd[k - 1] + self.cd[k - 1])
        return float(self.grid.tau * total)

    def step_residual(self, k, y, y_prev, uk_full):
        tau = self.grid.tau
        yq = self.asm.at_qp(y)
        my = self.M @ (y - y_prev)
        ky = self.K @ y
        fy = self.asm.load(self.data.f(self.xq, self._t(k), yq))
        rob = self.mfull * uk_full * y
        r = my + tau * (ky + fy + rob - self.G[k - 1])
        scale = max(np.max(np.abs(my)), tau * np.max(np.abs(ky)), tau * np.max(np.abs(fy)),
                    tau * np.max(np.abs(self.G[k - 1])), 1e-300)
        return r, scale

    def step_jacobian(self, k, y, uk_full):
        tau = self.grid.tau
        c = self.data.df(self.xq, self._t(k), self.asm.at_qp(y))
        return self.M + tau * (self.K + self.asm.mass(c) + sp.diags(self.mfull * uk_full))

    def march_state(self, u: GridFunction, warm_start: np.ndarray | None = None):
        """Implicit Euler march; returns the (M+1, n) trajectory and per-step
        factorized Jacobians at the converged states."""
        steps = self.grid.steps
        U = self.steps_view(u)
        ys = np.empty((steps + 1, self.n))
        ys[0] = self.y_init
        lus = []
        for k in range(1, steps + 1):
            uk = self.boundary_field(U[k - 1])
            res = lambda y, k=k, uk=uk: self.step_residual(k, y, ys[k - 1], uk)
            jac = lambda y, k=k, uk=uk: self.step_jacobian(k, y, uk)
            starts = [ys[k - 1]] if warm_start is None else [warm_start[k], ys[k - 1]]
            for i, start in enumerate(starts):
                try:
                    y, lu = newton_solve(res, jac, start, STATE_TOL, MAX_NEWTON, step=k)
                    break
                except StateSolveError:
                    if i == len(starts) - 1:
                        raise
            ys[k] = y
            lus.append(lu)
        return ys, lus

    def march_adjoint(self, u: GridFunction, ys=None, lus=None) -> np.ndarray:
        if ys is None:
            return self.linearize(u).lams
        return _backward(self, lus, lambda k: self.grid.tau * (self.M @ ys[k] - self.bd[k - 1]))

    def _march(self, u: GridFunction):
        if self._key is not None and np.array_equal(self._key, u.values):
            return self._traj, self._lus
        ys, lus = self.march_state(u, self._traj)
        self._key = u.values.copy()
        self._traj, self._lus, self._lin = ys, lus, None
        return ys, lus


def _forward(prob: ParabolicProblem, lus, source):
    """Solve lu_k x^k = M x^{k-1} + source(k), x^0 = 0."""
    out = np.zeros((prob.grid.steps + 1, prob.n))
    for k in range(1, prob.grid.steps + 1):
        out[k] = lus[k - 1].solve(prob.M @ out[k - 1] + source(k))
    return out


def _backward(prob: ParabolicProblem, lus, source):
    """Solve lu_k x^k = M x^{k+1} + source(k) backward; x^{M+1} = 0.

    Returns the adjoint layout: step k at row k-1, zero terminal row M.
    """
    steps = prob.grid.steps
    out = np.zeros((steps + 1, prob.n))
    nxt = np.zeros(prob.n)
    for k in range(steps, 0, -1):
        nxt = lus[k - 1].solve(prob.M @ nxt + source(k))
        out[k - 1] = nxt
    return out


class _ParabolicLinearization(Linearization):
    def __init__(self, prob: ParabolicProblem, u, ys, lams, lus):
        self.prob, self.control, self.ys = prob, u, ys
        steps, tau = prob.grid.steps, prob.grid.tau
        d, asm, xq = prob.data, prob.asm, prob.xq
        self.U = [prob.boundary_field(row) for row in prob.steps_view(u)]
        if lus is None:
            lus = [factorize(prob.step_jacobian(k, ys[k], self.U[k - 1])) for k in range(1, steps + 1)]
        self.lus = lus
        self.jy = [tau * (prob.M @ ys[k] - prob.bd[k - 1]) for k in range(1, steps + 1)]
        exact = lams is None
        if exact:
            lams = _backward(prob, lus, lambda k: self.jy[k - 1])
        self.lams = lams
        self.Lyy = []
        for k in range(1, steps + 1):
            c = asm.at_qp(lams[k - 1]) * d.d2f(xq, prob._t(k), asm.at_qp(ys[k]))
            self.Lyy.append(tau * (prob.M - asm.mass(c)))
        if exact:
            self.dy0 = np.zeros_like(ys)
            p = lams
        else:
            E = [prob.step_residual(k, ys[k], ys[k - 1], self.U[k - 1])[0] for k in range(1, steps + 1)]
            self.dy0 = _forward(prob, lus, lambda k: -E[k - 1])
            p = _backward(prob, lus, lambda k: self.jy[k - 1] + self.Lyy[k - 1] @ self.dy0[k])
        self.gradient_term = prob.space.function(self._pair(ys, p, lams, self.dy0))

    def _lam(self, k):
        return self.lams[k - 1]

    def _pair(self, ys, a, lams, b):
        """-(y^k a^k + lam^k b^k) on boundary nodes, for k = 1..M (a, lams in adjoint layout)."""
        nodes = self.prob.grid.boundary_nodes
        steps = self.prob.grid.steps
        out = np.empty((steps, nodes.size))
        for k in range(1, steps + 1):
            out[k - 1] = -(ys[k, nodes] * a[k - 1, nodes] + lams[k - 1, nodes] * b[k, nodes])
        return out.ravel()

    def _robin_source(self, V, field, k):
        """tau * m * v^k * field on boundary nodes."""
        return self.prob.grid.tau * self.prob.mfull * self.prob.boundary_field(V[k - 1]) * field

    def apply_hessian(self, v: GridFunction) -> GridFunction:
        prob = self.prob
        V = prob.steps_view(v)
        z = _forward(prob, self.lus, lambda k: -self._robin_source(V, self.ys[k], k))
        eta = _backward(prob, self.lus,
                        lambda k: self.Lyy[k - 1] @ z[k] - self._robin_source(V, self._lam(k), k))
        return prob.space.function(self._pair(self.ys, eta, self.lams, z))

    def advance(self, step: GridFunction):
        prob = self.prob
        V = prob.steps_view(step)
        z = _forward(prob, self.lus, lambda k: -self._robin_source(V, self.ys[k], k))
        dy = self.dy0 + z
        lam = _backward(prob, self.lus, lambda k: self.jy[k - 1] + self.Lyy[k - 1] @ dy[k]
                        - self._robin_source(V, self._lam(k), k))
        return self.ys + dy, lam

    def model_objective(self) -> float:
        return self.prob.tracking(self.ys)


def cubic_bilinear_problem(dim: int, refinement: int, horizon=4.0, alpha=0.1, beta=100.0) -> ParabolicProblem:
    grid = space_time_grid(dim, refinement, horizon)
    return ParabolicProblem(grid, cubic_bilinear_data(), BoxBounds(alpha, beta, exponent_p=2.0 * (dim + 1)))
