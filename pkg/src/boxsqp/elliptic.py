"""Semilinear elliptic problem with distributed control.

    min  int_Omega L(x, y_u) dx + kappa/2 ||u||^2_{L2(omega)},   alpha <= u <= beta,
    -Delta y + a0 y + f(x, y) = chi_omega u in Omega,  y = 0 on the boundary.

States are continuous P1 on a Kuhn mesh of the unit cube, controls are
piecewise constant on the cells of ``omega``.  All derivatives are those of
the discrete functional, so finite-difference checks see no discretization
error and the discrete Hessian is symmetric up to linear-solver round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import SetupError
from .fem import Assembler, SimplexMesh, factorize, newton_solve, unit_cube_mesh
from .measure import BoxBounds, GridFunction, MeasureSpace, classify_active
from .problem import LagrangeNewtonOracle, Linearization

Scalar = Callable[[np.ndarray, np.ndarray], np.ndarray]

STATE_TOL = 1e-12
MAX_NEWTON = 50


@dataclass(frozen=True)
class EllipticData:
    """Nonlinearity ``f`` (with df/dy >= 0) and integrand ``L``, each with its
    first two y-derivatives, as vectorized callables ``(x, y) -> array``.

    ``control_shift`` adds ``<e, u>`` to the objective (and ``e`` to phi); it
    is used to manufacture problems with a prescribed solution.
    """

    f: Scalar
    df: Scalar
    d2f: Scalar
    L: Scalar
    dL: Scalar
    d2L: Scalar
    a0: float = 0.0
    control_shift: np.ndarray | None = None


def bump_target(x: np.ndarray) -> np.ndarray:
    return np.prod(8.0 * x * (1.0 - x), axis=-1)


def exponential_tracking_data(target=bump_target) -> EllipticData:
    """f(y) = exp(y), L(x, y) = |y - y_d(x)|^2 / 2."""
    return EllipticData(
        f=lambda x, y: np.exp(y),
        df=lambda x, y: np.exp(y),
        d2f=lambda x, y: np.exp(y),
        L=lambda x, y: 0.5 * (y - target(x)) ** 2,
        dL=lambda x, y: y - target(x),
        d2L=lambda x, y: np.ones_like(y),
    )


class EllipticProblem(LagrangeNewtonOracle):
    def __init__(self, mesh: SimplexMesh, data: EllipticData, bounds: BoxBounds,
                 control_cells: np.ndarray | None = None):
        self.mesh, self.data, self._bounds = mesh, data, bounds
        interior = ~mesh.boundary
        dofs = np.full(mesh.n_nodes, -1)
        dofs[interior] = np.arange(interior.sum())
        self.asm = Assembler(mesh, dofs)
        self.K = self.asm.stiffness()
        if data.a0:
            self.K = self.K + data.a0 * self.asm.mass()
        if control_cells is None:
            control_cells = np.ones(mesh.n_cells, bool)
        self.control_cells = np.flatnonzero(control_cells)
        if self.control_cells.size == 0:
            raise SetupError("control region is empty")
        vol = mesh.volumes[self.control_cells]
        self.space = MeasureSpace(vol)
        k = mesh.dim + 1
        cd = dofs[mesh.cells[self.control_cells]]
        cols = np.repeat(np.arange(cd.shape[0]), k)
        vals = np.repeat(vol / k, k)
        keep = cd.ravel() >= 0
        # B u = int chi_omega u psi_i
        self.B = sp.csr_matrix((vals[keep], (cd.ravel()[keep], cols[keep])), shape=(self.asm.n, cd.shape[0]))
        self.Bt = self.B.T.tocsr()
        self.xq = self.asm.qp_points
        if data.control_shift is not None and np.asarray(data.control_shift).size != self.space.point_count:
            raise SetupError("control_shift has the wrong length")
        self._key = None
        self._y = None
        self._lu = None
        self._lin = None

    # --- ProblemOracle -----------------------------------------------------
    def control_space(self) -> MeasureSpace:
        return self.space

    def bounds(self) -> BoxBounds:
        return self._bounds

    def objective(self, u: GridFunction) -> float:
        y, _ = self._solve_state(u)
        val = self._tracking(y)
        if self.data.control_shift is not None:
            val += float(np.dot(self.space.weights * self.data.control_shift, u.values))
        return val

    def phi(self, u: GridFunction) -> GridFunction:
        return self.linearize(u).gradient_term

    def apply_phi_prime(self, u: GridFunction, v: GridFunction) -> GridFunction:
        return self.linearize(u).apply_hessian(v)

    # --- Lagrange-Newton support ------------------------------------------
    def zero_iterate(self):
        return np.zeros(self.asm.n), np.zeros(self.asm.n)

    def state_and_adjoint(self, u: GridFunction):
        lin = self.linearize(u)
        return lin.y.copy(), lin.lam.copy()

    def linearize(self, u: GridFunction, state=None, adjoint=None) -> Linearization:
        if state is None:
            y, lu = self._solve_state(u)
            if self._lin is None:
                self._lin = _EllipticLinearization(self, u, y, None, lu)
            return self._lin
        return _EllipticLinearization(self, u, np.asarray(state, float), np.asarray(adjoint, float), None)

    # --- discrete operators -----------------------------------------------
    def nodal(self, y: np.ndarray) -> np.ndarray:
        return self.asm.extend(y)

    def yq(self, y: np.ndarray) -> np.ndarray:
        return self.asm.at_qp(self.asm.extend(y))

    def state_residual(self, y: np.ndarray, u: GridFunction):
        yq = self.yq(y)
        ky = self.K @ y
        fy = self.asm.load(self.data.f(self.xq, yq))
        bu = self.B @ u.values
        scale = max(np.max(np.abs(ky)), np.max(np.abs(fy)), np.max(np.abs(bu)), 1e-300)
        return ky + fy - bu, scale

    def jacobian(self, y: np.ndarray):
        return self.K + self.asm.mass(self.data.df(self.xq, self.yq(y)))

    def _tracking(self, y: np.ndarray) -> float:
        return self.asm.integrate(self.data.L(self.xq, self.yq(y)))

    def _solve_state(self, u: GridFunction, warm_start: np.ndarray | None = None):
        if self._key is not None and np.array_equal(self._key, u.values):
            return self._y, self._lu
        start = warm_start if warm_start is not None else self._y
        if start is None:
            start = np.zeros(self.asm.n)
        y, lu = newton_solve(lambda z: self.state_residual(z, u), self.jacobian, start, STATE_TOL, MAX_NEWTON)
        self._key = u.values.copy()
        self._y, self._lu, self._lin = y, lu, None
        return y, lu

    def solve_state(self, u: GridFunction, warm_start: np.ndarray | None = None) -> np.ndarray:
        """Interior nodal state for control ``u``."""
        return self._solve_state(u, warm_start)[0]

    def solve_adjoint(self, u: GridFunction) -> np.ndarray:
        return self.linearize(u).lam


class _EllipticLinearization(Linearization):
    def __init__(self, prob: EllipticProblem, u, y, lam, lu):
        self.prob, self.control, self.y = prob, u, y
        d, asm, xq = prob.data, prob.asm, prob.xq
        yq = prob.yq(y)
        self.lu = factorize(prob.jacobian(y)) if lu is None else lu
        self.jy = asm.load(d.dL(xq, yq))
        exact = lam is None
        if exact:
            lam = self.lu.solve(self.jy)
        self.lam = lam
        lamq = prob.yq(lam)
        self.Lyy = asm.mass(d.d2L(xq, yq) - lamq * d.d2f(xq, yq))
        if exact:
            self.dy0 = np.zeros_like(y)
            p = lam
        else:
            r, _ = prob.state_residual(y, u)
            self.dy0 = self.lu.solve(-r)
            p = self.lu.solve(self.jy + self.Lyy @ self.dy0)
        grad = self._to_control(p)
        if d.control_shift is not None:
            grad = grad + d.control_shift
        self.gradient_term = prob.space.function(grad)

    def _to_control(self, vec):
        return (self.prob.Bt @ vec) / self.prob.space.weights

    def apply_hessian(self, v: GridFunction) -> GridFunction:
        z = self.lu.solve(self.prob.B @ v.values)
        eta = self.lu.solve(self.Lyy @ z)
        return self.prob.space.function(self._to_control(eta))

    def advance(self, step: GridFunction):
        dy = self.dy0 + self.lu.solve(self.prob.B @ step.values)
        lam = self.lu.solve(self.jy + self.Lyy @ dy)
        return self.y + dy, lam

    def model_objective(self) -> float:
        val = self.prob._tracking(self.y)
        if self.prob.data.control_shift is not None:
            val += float(np.dot(self.prob.space.weights * self.prob.data.control_shift, self.control.values))
        return val


def exponential_tracking_problem(dim: int, refinement: int, alpha=0.1, beta=1.0) -> EllipticProblem:
    return EllipticProblem(unit_cube_mesh(dim, refinement), exponential_tracking_data(), BoxBounds(alpha, beta))


def manufacture_instance(mesh: SimplexMesh, target_control: GridFunction, data: EllipticData, *,
                         kappa: float, bounds: BoxBounds, margin: float | np.ndarray = 0.1,
                         control_cells=None) -> EllipticData:
    """Data whose optimality system is solved exactly by ``target_control``.

    Adds a control shift ``e`` so that ``phi(target) + kappa*target + e`` is
    zero on free points, ``+margin`` on lower-active and ``-margin`` on
    upper-active points.  The target then satisfies the projection formula
    with strict complementarity.
    """
    if not bounds.contains(target_control):
        raise SetupError("target control violates the bounds")
    margin = np.broadcast_to(np.asarray(margin, float), target_control.values.shape)
    part = classify_active(target_control, bounds)
    active = np.concatenate([part.lower_active, part.upper_active])
    if active.size and np.any(margin[active] <= 0):
        raise SetupError("active target points need a positive margin (biactive target)")
    base = replace(data, control_shift=None)
    prob = EllipticProblem(mesh, base, bounds, control_cells)
    g = prob.phi(target_control).values + kappa * target_control.values
    xi = np.zeros_like(g)
    xi[part.lower_active] = margin[part.lower_active]
    xi[part.upper_active] = -margin[part.upper_active]
    return replace(data, control_shift=xi - g)
