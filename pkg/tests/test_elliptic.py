import numpy as np
import pytest

from boxsqp.elliptic import (EllipticData, EllipticProblem, exponential_tracking_data, exponential_tracking_problem,
                             manufacture_instance)
from boxsqp.errors import SetupError
from boxsqp.fem import simplex_quadrature, unit_cube_mesh
from boxsqp.measure import BoxBounds, weighted_inner
from boxsqp.problem import SqpConfig, fd_gradient_check, fd_hessian_check, kkt_residual, symmetry_defect
from boxsqp.sqp import run_sqpnln

from conftest import smooth_direction

ZERO = lambda x, y: np.zeros_like(y)
ONE = lambda x, y: np.ones_like(y)


def data(f=ZERO, df=ZERO, d2f=ZERO, L=None, dL=None, d2L=None):
    L = L or (lambda x, y: 0.5 * y ** 2)
    dL = dL or (lambda x, y: y)
    d2L = d2L or ONE
    return EllipticData(f, df, d2f, L, dL, d2L)


def centroids(mesh, cells=None):
    c = mesh.points[mesh.cells].mean(axis=1)
    return c if cells is None else c[cells]


def naive_residual(prob, y, u):
    """Element-by-element residual of -div grad y + f(y) - chi u, written without the assembler."""
    mesh, q = prob.mesh, simplex_quadrature(prob.mesh.dim)
    full = prob.nodal(y)
    uc = np.zeros(mesh.n_cells)
    uc[prob.control_cells] = u.values
    r = np.zeros(mesh.n_nodes)
    for c, nodes in enumerate(mesh.cells):
        g, vol = mesh.grads[c], mesh.volumes[c]
        r[nodes] += vol * g @ (g.T @ full[nodes])
        for lam, w in zip(q.barycentric, q.weights):
            x = lam @ mesh.points[nodes]
            yq = lam @ full[nodes]
            r[nodes] += vol * w * lam * (prob.data.f(x[None], np.array([yq]))[0] - uc[c])
    return r[~mesh.boundary]


class TestStateSolve:
    def test_zero_control_linear_f(self):
        prob = EllipticProblem(unit_cube_mesh(2, 2), data(f=lambda x, y: y, df=ONE), BoxBounds())
        np.testing.assert_array_equal(prob.solve_state(prob.control_space().zeros()), 0.0)

    def test_poisson_1d_nodal_exactness(self):
        mesh = unit_cube_mesh(1, 5)
        prob = EllipticProblem(mesh, data(), BoxBounds())
        y = prob.solve_state(prob.control_space().constant(1.0))
        x = mesh.points[~mesh.boundary, 0]
        np.testing.assert_allclose(y, 0.5 * x * (1 - x), atol=1e-14)

    def test_example_residual_independent_evaluation(self):
        prob = exponential_tracking_problem(2, 2)
        u = prob.control_space().constant(0.55)
        y = prob.solve_state(u)
        r_naive = naive_residual(prob, y, u)
        r, scale = prob.state_residual(y, u)
        assert np.max(np.abs(r_naive)) <= 1e-12 * scale
        np.testing.assert_allclose(r, r_naive, atol=1e-14)

    def test_example_residual_3d(self):
        prob = exponential_tracking_problem(3, 3)
        u = prob.control_space().constant(0.55)
        r, scale = prob.state_residual(prob.solve_state(u), u)
        assert np.max(np.abs(r)) <= 1e-12 * scale

    def test_positivity(self):
        prob = EllipticProblem(unit_cube_mesh(2, 3), data(f=lambda x, y: y ** 3, df=lambda x, y: 3 * y ** 2,
                                                          d2f=lambda x, y: 6 * y), BoxBounds(0.0, 5.0))
        rng = np.random.default_rng(0)
        y = prob.solve_state(prob.control_space().function(rng.uniform(0, 5, prob.space.point_count)))
        assert y.min() >= -1e-12

    def test_control_subset(self):
        mesh = unit_cube_mesh(2, 2)
        cells = centroids(mesh)[:, 0] < 0.5
        prob = EllipticProblem(mesh, exponential_tracking_data(), BoxBounds(0.1, 1.0), cells)
        assert prob.control_space().point_count == cells.sum()
        assert prob.control_space().total_measure == pytest.approx(0.5)
        with pytest.raises(SetupError):
            EllipticProblem(mesh, exponential_tracking_data(), BoxBounds(), np.zeros(mesh.n_cells, bool))


class TestAdjointAndPhi:
    def test_zero_tracking_gives_zero_phi(self):
        prob = EllipticProblem(unit_cube_mesh(2, 2), data(L=lambda x, y: 0 * y, dL=ZERO, d2L=ZERO), BoxBounds())
        u = prob.control_space().constant(1.0)
        np.testing.assert_array_equal(prob.solve_adjoint(u), 0.0)
        np.testing.assert_array_equal(prob.phi(u).values, 0.0)

    def test_phi_is_cell_average_of_adjoint(self, elliptic2d):
        u = elliptic2d.control_space().constant(0.4)
        lam = elliptic2d.nodal(elliptic2d.solve_adjoint(u))
        avg = lam[elliptic2d.mesh.cells].mean(axis=1)  # exact mean of a P1 function on a simplex
        np.testing.assert_allclose(elliptic2d.phi(u).values, avg, atol=1e-15)

    def test_adjoint_vanishes_on_boundary(self, elliptic2d):
        u = elliptic2d.control_space().constant(0.4)
        full = elliptic2d.nodal(elliptic2d.solve_adjoint(u))
        assert np.all(full[elliptic2d.mesh.boundary] == 0.0)

    def test_fd_second_order(self, elliptic2d):
        sp = elliptic2d.control_space()
        xc = centroids(elliptic2d.mesh)
        u = sp.constant(0.55)
        v, w = sp.function(smooth_direction(xc, 20.0)), sp.function(smooth_direction(xc, 20.0, 0.3))
        for check in (fd_gradient_check(elliptic2d, u, v, [1e-2, 1e-3]),
                      fd_hessian_check(elliptic2d, u, v, w, [1e-2, 1e-3])):
            (_, e1), (_, e2) = check
            assert 50 <= e1 / e2 <= 200


class TestHessian:
    def test_zero_direction(self, elliptic2d):
        sp = elliptic2d.control_space()
        np.testing.assert_array_equal(elliptic2d.apply_phi_prime(sp.constant(0.5), sp.zeros()).values, 0.0)

    def test_linear_and_symmetric(self, elliptic2d):
        sp = elliptic2d.control_space()
        rng = np.random.default_rng(1)
        u = sp.function(rng.uniform(0.1, 1.0, sp.point_count))
        v, w = sp.function(rng.standard_normal(sp.point_count)), sp.function(rng.standard_normal(sp.point_count))
        hv, hw = elliptic2d.apply_phi_prime(u, v), elliptic2d.apply_phi_prime(u, w)
        np.testing.assert_allclose(elliptic2d.apply_phi_prime(u, 2 * v - w).values, (2 * hv - hw).values,
                                   atol=1e-14)
        assert symmetry_defect(elliptic2d, u, v, w) <= 1e-12 * (abs(weighted_inner(hv, w)) + 1e-300) + 1e-15


class TestLinearization:
    def test_exact_iterates_reproduce_reduced_quantities(self, elliptic2d):
        sp = elliptic2d.control_space()
        u = sp.constant(0.6)
        y, lam = elliptic2d.state_and_adjoint(u)
        lin = elliptic2d.linearize(u, y, lam)
        np.testing.assert_allclose(lin.gradient_term.values, elliptic2d.phi(u).values, atol=1e-14)
        v = sp.function(np.linspace(-1, 1, sp.point_count))
        np.testing.assert_allclose(lin.apply_hessian(v).values, elliptic2d.apply_phi_prime(u, v).values, atol=1e-14)
        y1, lam1 = lin.advance(sp.zeros())
        np.testing.assert_allclose(y1, y, atol=1e-14)
        np.testing.assert_allclose(lam1, lam, atol=1e-14)

    def test_linearized_step_matches_state_derivative(self, elliptic2d):
        sp = elliptic2d.control_space()
        u = sp.constant(0.6)
        y, lam = elliptic2d.state_and_adjoint(u)
        v = sp.function(smooth_direction(centroids(elliptic2d.mesh), 0.1))
        y1, _ = elliptic2d.linearize(u, y, lam).advance(v)
        h = 1e-4
        yp = elliptic2d.solve_state(u + h * v)
        ym = elliptic2d.solve_state(u - h * v)
        np.testing.assert_allclose(y1 - y, (yp - ym) / (2 * h), atol=1e-9)


class TestManufactured:
    def _target(self, mesh, seed, bounds):
        rng = np.random.default_rng(seed)
        vals = rng.uniform(0.3, 0.8, mesh.n_cells)
        pick = rng.random(mesh.n_cells)
        vals[pick < 0.15] = bounds.lower
        vals[pick > 0.85] = bounds.upper
        return vals

    def test_interior_constant_target(self):
        mesh, b = unit_cube_mesh(1, 3), BoxBounds(0.0, 1.0)
        prob0 = EllipticProblem(mesh, exponential_tracking_data(), b)
        target = prob0.control_space().constant(0.5)
        d = manufacture_instance(mesh, target, exponential_tracking_data(), kappa=0.2, bounds=b)
        assert kkt_residual(EllipticProblem(mesh, d, b), 0.2, target) <= 1e-15

    def test_recovery_1d(self):
        mesh, b = unit_cube_mesh(1, 2), BoxBounds(0.1, 1.0)
        space = EllipticProblem(mesh, exponential_tracking_data(), b).control_space()
        target = space.function(self._target(mesh, 0, b))
        d = manufacture_instance(mesh, target, exponential_tracking_data(), kappa=0.1, bounds=b)
        run = run_sqpnln(EllipticProblem(mesh, d, b), space.constant(0.55), SqpConfig(kappa=0.1))
        assert run.converged
        np.testing.assert_allclose(run.final_control.values, target.values, atol=1e-10)

    def test_fully_active_target_with_affine_f_takes_one_step(self):
        mesh, b = unit_cube_mesh(1, 3), BoxBounds(0.0, 1.0)
        lin = data(f=lambda x, y: y, df=ONE)
        space = EllipticProblem(mesh, lin, b).control_space()
        target = space.function(np.where(np.arange(space.point_count) % 2, 0.0, 1.0))
        d = manufacture_instance(mesh, target, lin, kappa=0.5, bounds=b, margin=1.0)
        run = run_sqpnln(EllipticProblem(mesh, d, b), space.constant(0.3), SqpConfig(kappa=0.5))
        np.testing.assert_array_equal(run.controls[1].values, target.values)

    def test_biactive_margin_rejected(self):
        mesh, b = unit_cube_mesh(1, 2), BoxBounds(0.0, 1.0)
        space = EllipticProblem(mesh, exponential_tracking_data(), b).control_space()
        with pytest.raises(SetupError):
            manufacture_instance(mesh, space.constant(0.0), exponential_tracking_data(), kappa=1.0, bounds=b,
                                 margin=0.0)

    def test_infeasible_target_rejected(self):
        mesh, b = unit_cube_mesh(1, 2), BoxBounds(0.0, 1.0)
        space = EllipticProblem(mesh, exponential_tracking_data(), b).control_space()
        with pytest.raises(SetupError):
            manufacture_instance(mesh, space.constant(2.0), exponential_tracking_data(), kappa=1.0, bounds=b)
