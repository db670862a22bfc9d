import numpy as np
import pytest

from boxsqp.errors import InfeasibleError, SetupError
from boxsqp.measure import BoxBounds, MeasureSpace
from boxsqp.problem import fd_gradient_check, fd_hessian_check, symmetry_defect
from boxsqp.qp import QpInstance
from boxsqp.verification import (brute_force_qp, dense_operator, lipschitz_stability_check, make_synthetic,
                                 masked_coercivity)


def scalar_qp(lin, kappa=1.0, h=0.0, bounds=BoxBounds(-1.0, 1.0)):
    sp = MeasureSpace([1.0])
    return QpInstance(sp, sp.zeros(), kappa, bounds, sp.function([lin]), lambda v: h * v)


class TestSynthetic:
    def test_reproducible(self):
        a, b = make_synthetic(4, 6), make_synthetic(4, 6)
        np.testing.assert_array_equal(a.H, b.H)
        assert not np.allclose(make_synthetic(5, 6).H, a.H)

    def test_self_adjoint_in_weighted_product(self):
        s = make_synthetic(1, 9)
        WH = s.space.weights[:, None] * s.H
        np.testing.assert_allclose(WH, WH.T, atol=1e-14)

    def test_explicit_spectrum(self):
        eig = np.array([0.5, 1.0, 2.0, 4.0])
        s = make_synthetic(0, 4, eig, kappa=0.0 + 1.0)
        np.testing.assert_allclose(np.sort(np.linalg.eigvals(s.H).real), eig, atol=1e-12)
        assert s.coercivity == pytest.approx(1.5)

    def test_coercivity_bound(self):
        s = make_synthetic(2, 10, (-0.5, 2.0), epsilon=0.1, kappa=1.0)
        assert masked_coercivity(s, np.ones(10, bool)) >= s.coercivity

    @pytest.mark.parametrize("n", [0, 65])
    def test_size_limits(self, n):
        with pytest.raises(SetupError):
            make_synthetic(0, n)

    def test_fd_checks_at_roundoff_for_quadratics(self):
        s = make_synthetic(3, 8, epsilon=0.0)
        rng = np.random.default_rng(0)
        u, v, w = (s.space.function(rng.standard_normal(8)) for _ in range(3))
        assert max(e for _, e in fd_gradient_check(s, u, v, [1e-2, 1e-3, 1e-4])) < 1e-10
        assert max(e for _, e in fd_hessian_check(s, u, v, w, [1e-2, 1e-3, 1e-4])) < 1e-10
        assert symmetry_defect(s, u, v, w) < 1e-13


class TestBruteForce:
    def test_scalar_interior(self):
        np.testing.assert_allclose(brute_force_qp(scalar_qp(0.5)).values, [-0.5])

    def test_scalar_clamped(self):
        np.testing.assert_allclose(brute_force_qp(scalar_qp(5.0)).values, [-1.0])

    def test_dense_operator(self):
        s = make_synthetic(0, 5)
        u = s.space.zeros()
        q = QpInstance.from_oracle(s, 0.7, u)
        np.testing.assert_allclose(dense_operator(q), 0.7 * np.eye(5) + s.H, atol=1e-14)

    def test_size_cap(self):
        s = make_synthetic(0, 17)
        with pytest.raises(SetupError):
            brute_force_qp(QpInstance.from_oracle(s, 1.0, s.space.zeros()))

    def test_nonconvex_scalar_picks_global_minimizer(self):
        # kappa + h = -1: minimizers only at the ends, -1 is better for a positive linear term
        np.testing.assert_allclose(brute_force_qp(scalar_qp(0.2, 1.0, -2.0)).values, [-1.0])

    def test_unbounded_nonconvex(self):
        with pytest.raises(InfeasibleError):
            brute_force_qp(scalar_qp(0.2, 1.0, -2.0, BoxBounds()))

    def test_exhaustive_check_against_grid_search(self):
        s = make_synthetic(11, 2, (0.0, 1.0), kappa=0.3)
        q = QpInstance.from_oracle(s, 0.3, s.space.zeros())
        v = brute_force_qp(q).values
        M = s.space.weights[:, None] * dense_operator(q)
        g = s.space.weights * q.linear_term.values
        grid = np.linspace(-1, 1, 801)
        X, Y = np.meshgrid(grid, grid, indexing="ij")
        P = np.stack([X.ravel(), Y.ravel()], axis=1)
        vals = 0.5 * np.einsum("ki,ij,kj->k", P, M, P) + P @ g
        assert 0.5 * v @ M @ v + g @ v <= vals.min() + 1e-12


class TestLipschitzStability:
    def test_equal_data(self):
        s = make_synthetic(0, 6)
        b = np.ones(6)
        lhs, rhs, ok = lipschitz_stability_check(s, b, b, BoxBounds(-1, 1), np.ones(6, bool))
        assert lhs == 0.0 and rhs == 0.0 and ok

    def test_equality_case(self):
        s = make_synthetic(0, 6, np.zeros(6), kappa=2.0)
        rng = np.random.default_rng(0)
        b0, b1 = rng.standard_normal((2, 6))
        lhs, rhs, ok = lipschitz_stability_check(s, b0, b1, BoxBounds(-100, 100), np.ones(6, bool))
        assert ok and lhs / rhs == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_masked_draws(self, seed):
        rng = np.random.default_rng(seed)
        s = make_synthetic(seed, 7, (-0.4, 3.0), kappa=1.0)
        mask = rng.random(7) < 0.6
        mask[0] = True
        lam = masked_coercivity(s, mask)
        b0, b1 = 2 * rng.standard_normal((2, 7))
        assert lipschitz_stability_check(s, b0, b1, BoxBounds(-1, 1), mask, lam)[2]

    def test_overclaimed_lambda(self):
        s = make_synthetic(0, 4, np.ones(4), kappa=1.0)
        with pytest.raises(SetupError):
            lipschitz_stability_check(s, np.zeros(4), np.ones(4), BoxBounds(-1, 1), np.ones(4, bool), lam=2.5)

    def test_box_must_contain_zero(self):
        s = make_synthetic(0, 4)
        with pytest.raises(SetupError):
            lipschitz_stability_check(s, np.zeros(4), np.ones(4), BoxBounds(0.5, 1), np.ones(4, bool))
