import numpy as np
import pytest

from boxsqp.errors import IndefiniteError, NonConvergenceError, SetupError
from boxsqp.measure import BoxBounds, MeasureSpace
from boxsqp.qp import QpInstance, qp_objective, solve_projected_gradient, solve_ssn, weighted_cg
from boxsqp.verification import brute_force_qp, make_synthetic


def dense_qp(H, lin, w, kappa=1.0, bounds=BoxBounds(-1.0, 1.0), base=None):
    sp = MeasureSpace(w)
    H = np.asarray(H, float)
    x = sp.zeros() if base is None else sp.function(base)
    return QpInstance(sp, x, kappa, bounds, sp.function(lin), lambda v: sp.function(H @ v.values))


def random_qp(seed, n=8, kappa=0.5):
    s = make_synthetic(seed, n, (0.0, 3.0), kappa=kappa)
    u = s.space.function(np.random.default_rng(seed).uniform(-1, 1, n))
    return QpInstance.from_oracle(s, kappa, u)


class TestWeightedCg:
    def test_solves_spd_system(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((6, 6))
        A = A @ A.T + 6 * np.eye(6)
        b = rng.standard_normal(6)
        x, k = weighted_cg(lambda p: A @ p, b, np.ones(6), 1e-14, 60)
        np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-10)
        assert k <= 6 + 2

    def test_weighted_inner_product(self):
        # the operator W^{-1} S is self-adjoint for <a, b> = sum w a b
        w = np.array([0.5, 1.0, 2.0])
        S = np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]])
        A = S / w[:, None]
        b = np.array([1.0, -1.0, 2.0])
        x, _ = weighted_cg(lambda p: A @ p, b, w, 1e-14, 30)
        np.testing.assert_allclose(A @ x, b, atol=1e-12)

    def test_zero_rhs(self):
        x, k = weighted_cg(lambda p: p, np.zeros(3), np.ones(3), 1e-12, 10)
        assert k == 0 and not x.any()

    def test_negative_curvature(self):
        with pytest.raises(IndefiniteError):
            weighted_cg(lambda p: -p, np.ones(3), np.ones(3), 1e-12, 10)

    def test_iteration_cap(self):
        A = np.diag(np.arange(1.0, 11.0))
        with pytest.raises(NonConvergenceError) as exc:
            weighted_cg(lambda p: A @ p, np.ones(10), np.ones(10), 1e-14, 2)
        assert exc.value.residual > 0


class TestSemismoothNewton:
    def test_scalar_interior(self):
        res = solve_ssn(dense_qp([[0.0]], [0.5], [1.0]))
        np.testing.assert_allclose(res.step.values, [-0.5])

    def test_scalar_clamped(self):
        res = solve_ssn(dense_qp([[0.0]], [5.0], [1.0]))
        np.testing.assert_array_equal(res.control.values, [-1.0])
        assert res.final_active_sets.counts == (0, 1, 0)

    def test_unconstrained_is_linear_solve(self):
        H = np.array([[2.0, 0.5], [0.5, 1.0]])
        res = solve_ssn(dense_qp(H, [1.0, -2.0], [1.0, 1.0], bounds=BoxBounds()))
        np.testing.assert_allclose(res.step.values, np.linalg.solve(H + np.eye(2), [-1.0, 2.0]), rtol=1e-12)

    def test_base_point_shifts_bounds(self):
        # the QP variable is a step; bounds apply to base + step
        res = solve_ssn(dense_qp([[0.0]], [0.0], [1.0], base=[0.8]))
        np.testing.assert_allclose(res.control.values, [0.8])
        np.testing.assert_allclose(res.step.values, [0.0], atol=1e-15)

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_brute_force(self, seed):
        q = random_qp(seed)
        res = solve_ssn(q)
        np.testing.assert_allclose(res.step.values, brute_force_qp(q).values, atol=1e-10)
        assert res.fixed_point_residual <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_projected_gradient(self, seed):
        q = random_qp(100 + seed, n=30)
        a = solve_ssn(q).step.values
        b = solve_projected_gradient(q, tol=1e-11).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_active_points_sit_exactly_on_bounds(self):
        q = random_qp(3)
        res = solve_ssn(q)
        u = res.control.values
        np.testing.assert_array_equal(u[res.final_active_sets.lower_active], -1.0)
        np.testing.assert_array_equal(u[res.final_active_sets.upper_active], 1.0)

    def test_minimizes_objective(self):
        q = random_qp(4)
        v = solve_ssn(q).step
        rng = np.random.default_rng(4)
        best = qp_objective(q, v)
        for _ in range(50):
            trial = np.clip(q.base_point.values + v.values + 0.05 * rng.standard_normal(8), -1, 1)
            assert qp_objective(q, q.space.function(trial - q.base_point.values)) >= best - 1e-12

    def test_warm_start(self):
        q = random_qp(5)
        cold = solve_ssn(q)
        warm = solve_ssn(q, cold.step)
        np.testing.assert_allclose(warm.step.values, cold.step.values, atol=1e-13)
        assert warm.ssn_iterations <= cold.ssn_iterations

    def test_iteration_cap_reports_residual(self):
        q = random_qp(6)
        with pytest.raises(NonConvergenceError):
            solve_ssn(q, max_iters=1, cg_tol=1e-2)

    def test_indefinite_free_block(self):
        with pytest.raises(IndefiniteError):
            solve_ssn(dense_qp([[-3.0]], [0.1], [1.0], bounds=BoxBounds()))

    def test_needs_positive_kappa(self):
        with pytest.raises(SetupError):
            dense_qp([[1.0]], [0.0], [1.0], kappa=0.0)

    def test_counts_hessian_applications(self):
        q = random_qp(7)
        solve_ssn(q)
        assert q.applications > 0
