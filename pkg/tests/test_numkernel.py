import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpforge import numkernel as nk
from lpforge import oracles

P_GRID = [1.0, 4 / 3, 2.0, 4.0, 16.0, nk.INF]

finite_vecs = arrays(np.float64, st.integers(1, 30),
                     elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


class TestLpNorm:
    def test_pythagorean(self):
        assert nk.lp_norm([3.0, 4.0], 2) == 5.0

    def test_l1(self):
        assert nk.lp_norm([3.0, 4.0], 1) == 7.0

    def test_four_thirds_against_mpmath(self):
        with mpmath.workdps(40):
            ref = float((mpmath.mpf(3) ** (mpmath.mpf(4) / 3) + mpmath.mpf(4) ** (mpmath.mpf(4) / 3))
                        ** (mpmath.mpf(3) / 4))
        got = nk.lp_norm([3.0, 4.0], 4 / 3)
        assert got == pytest.approx(ref, rel=1e-14)
        assert got == pytest.approx(5.906322965648889, rel=1e-14)
        # the quoted 4-digit value is approximate
        assert abs(got - 5.9057) < 1e-3

    def test_inf_is_max(self):
        assert nk.lp_norm([-7.0, 2.0, 5.0], nk.INF) == 7.0

    def test_large_p_no_overflow(self):
        v = np.array([1e200, 3e200, 2e200])
        assert nk.lp_norm(v, 1e6) == pytest.approx(3e200, rel=1e-5)
        assert math.isfinite(nk.lp_norm(v, 2))

    def test_nan_raises(self):
        with pytest.raises(nk.DomainError):
            nk.lp_norm([1.0, np.nan], 2)

    def test_p_below_one_raises(self):
        with pytest.raises(nk.DomainError):
            nk.lp_norm([1.0, 2.0], 0.5)

    def test_zero_vector(self):
        assert nk.lp_norm(np.zeros(4), 3.0) == 0.0

    def test_axis(self):
        V = np.array([[3.0, 4.0], [6.0, 8.0]])
        np.testing.assert_allclose(nk.lp_norm(V, 2, axis=1), [5.0, 10.0])

    @pytest.mark.parametrize("p", [1.5, 3.0, 7.0, 64.0])
    def test_matches_mpmath(self, p):
        rng = np.random.default_rng(3)
        for _ in range(5):
            v = rng.standard_normal(17) * 1e3
            assert nk.lp_norm(v, p) == pytest.approx(oracles.mp_lp_norm(v, p), rel=1e-13)

    @settings(max_examples=200, deadline=None)
    @given(finite_vecs, st.floats(-1e3, 1e3, allow_nan=False))
    def test_homogeneity(self, v, c):
        for p in P_GRID:
            lhs = nk.lp_norm(c * v, p)
            rhs = abs(c) * nk.lp_norm(v, p)
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)

    @settings(max_examples=200, deadline=None)
    @given(finite_vecs)
    def test_non_increasing_in_p(self, v):
        vals = [nk.lp_norm(v, p) for p in P_GRID]
        for a, b in zip(vals, vals[1:]):
            assert b <= a * (1 + 1e-12) + 1e-300


class TestExponents:
    def test_dual_pairs(self):
        assert nk.dual_exponent(2.0) == 2.0
        assert nk.dual_exponent(4.0) == pytest.approx(4 / 3)
        assert nk.dual_exponent(nk.INF) == 1.0

    def test_roundtrip(self):
        for p in (2.0, 3.0, 16.0, 1e6):
            assert nk.primal_exponent(nk.dual_exponent(p)) == pytest.approx(p, rel=1e-9)
        assert nk.primal_exponent(1.0) == nk.INF

    def test_bad_domain(self):
        with pytest.raises(nk.DomainError):
            nk.dual_exponent(1.0)
        with pytest.raises(nk.DomainError):
            nk.primal_exponent(0.5)


class TestTape:
    def test_half_squared_norm(self):
        val, g = nk.value_and_input_grad(lambda x: nk.mul(nk.vsum(nk.mul(x, x)), 0.5), [1.0, -2.0])
        assert val == 2.5
        np.testing.assert_array_equal(g, [1.0, -2.0])

    def test_sum(self):
        val, g = nk.value_and_input_grad(nk.vsum, [5.0, 7.0, 9.0])
        assert val == 21.0
        np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])

    def test_operators(self):
        f = lambda x: nk.vsum(3.0 * x - x * x + 1.0)  # noqa: E731
        val, g = nk.value_and_input_grad(f, [1.0, 2.0])
        assert val == (3 - 1 + 1) + (6 - 4 + 1)
        np.testing.assert_allclose(g, [1.0, -1.0])

    def test_reused_node_accumulates(self):
        def f(x):
            y = nk.mul(x, 2.0)
            return nk.vsum(nk.add(y, y))

        np.testing.assert_array_equal(nk.value_and_input_grad(f, [1.0, 1.0])[1], [4.0, 4.0])

    def test_unsupported_ufunc(self):
        with pytest.raises(nk.UnsupportedPrimitive):
            nk.value_and_input_grad(lambda x: nk.vsum(np.sin(x)), [1.0])

    def test_power_and_division_rejected(self):
        with pytest.raises(nk.UnsupportedPrimitive):
            nk.value_and_input_grad(lambda x: nk.vsum(x ** 2), [1.0])
        with pytest.raises(nk.UnsupportedPrimitive):
            nk.value_and_input_grad(lambda x: nk.vsum(1.0 / x), [1.0])

    def test_non_scalar_output_rejected(self):
        with pytest.raises(nk.UnsupportedPrimitive):
            nk.value_and_input_grad(lambda x: nk.mul(x, 2.0), [1.0, 2.0])

    def test_foreign_output_rejected(self):
        with pytest.raises(nk.UnsupportedPrimitive):
            nk.value_and_input_grad(lambda x: float(x.value.sum()), [1.0])

    def test_affine_shape_mismatch(self):
        with pytest.raises(nk.DomainError):
            nk.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros(4))

    @pytest.mark.parametrize("act", [nk.relu, nk.gelu])
    def test_primitives_vs_finite_differences(self, act):
        rng = np.random.default_rng(11)
        for seed in range(20):
            W = rng.standard_normal((3, 5))
            b = rng.standard_normal(3)
            y = rng.integers(0, 3, size=2)
            x = rng.standard_normal((2, 5))

            def f(xv):
                return nk.softmax_xent(nk.affine(act(xv), W, b), y)

            _, g = nk.value_and_input_grad(f, x)
            fd = oracles.fd_grad(lambda z: float(f(nk.Var(z)).value), x, h=1e-5)
            assert np.max(np.abs(g - fd.ravel())) / np.max(np.abs(fd)) < 1e-4

    def test_xent_reductions(self):
        logits = np.array([[2.0, 0.0], [0.0, 1.0]])
        per = nk.softmax_xent(logits, [0, 0], reduction="none").value
        assert nk.softmax_xent(logits, [0, 0], reduction="sum").value == pytest.approx(per.sum())
        assert nk.softmax_xent(logits, [0, 0]).value == pytest.approx(per.mean())
        assert per[0] == pytest.approx(math.log(1 + math.exp(-2.0)))


def _quad(A):
    """Tape function for x^T A x / 2; A x is an affine node with zero bias."""
    A = np.asarray(A, dtype=np.float64)
    return lambda x: nk.mul(nk.vsum(nk.mul(x, nk.affine(x, A, np.zeros(len(A))))), 0.5)


class TestCurvature:
    def test_hvp_diag_first_axis(self):
        f = _quad(np.diag([2.0, 3.0]))
        np.testing.assert_allclose(nk.hvp(f, [0.3, -0.1], [1.0, 0.0]), [2.0, 0.0], atol=1e-9)

    def test_hvp_diag_second_axis(self):
        f = _quad(np.diag([2.0, 3.0]))
        np.testing.assert_allclose(nk.hvp(f, [0.3, -0.1], [0.0, 1.0]), [0.0, 3.0], atol=1e-9)

    def test_hvp_zero_direction(self):
        with pytest.raises(nk.DomainError):
            nk.hvp(_quad(np.eye(2)), [0.0, 0.0], [0.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-6, 1e-2))
    def test_hvp_exact_on_quadratics(self, seed, h):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 8))
        B = rng.standard_normal((d, d))
        A = B + B.T
        v = rng.standard_normal(d)
        hv = nk.hvp_from_grad(lambda z: A @ z, rng.standard_normal(d), v, h)
        assert np.linalg.norm(hv - A @ v) <= 1e-8 * max(np.linalg.norm(A @ v), 1e-12)

    def test_eigs_positive_diag(self):
        est = nk.extreme_eigs(_quad(np.diag([5.0, 1.0])), [0.1, 0.2], max_iter=500, tol=1e-10)
        assert est.lambda_max == pytest.approx(5.0, abs=1e-6)
        assert est.lambda_min == pytest.approx(1.0, abs=1e-6)
        assert est.residual <= 1e-6

    def test_eigs_indefinite_diag(self):
        est = nk.extreme_eigs(_quad(np.diag([-2.0, 4.0])), [0.1, 0.2], max_iter=500, tol=1e-10)
        assert est.lambda_max == pytest.approx(4.0, abs=1e-6)
        assert est.lambda_min == pytest.approx(-2.0, abs=1e-6)
        assert est.spectral_norm == pytest.approx(4.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_eigs_random_diagonal(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.uniform(-5, 5, size=6)
        w[0], w[1] = 7.0, -6.0
        est = nk.extreme_eigs_from_grad(lambda z: w * z, np.zeros(6), max_iter=2000, tol=1e-10)
        assert est.lambda_max == pytest.approx(7.0, abs=1e-6)
        assert est.lambda_min == pytest.approx(-6.0, abs=1e-6)
        assert est.lambda_max >= est.lambda_min and est.residual >= 0

    def test_non_convergence_flagged_not_raised(self):
        # nearly degenerate top eigenvalues converge slowly
        w = np.array([1.0, 0.999999, 0.5])
        est = nk.extreme_eigs_from_grad(lambda z: w * z, np.zeros(3), max_iter=3, tol=1e-14)
        assert est.residual > 1e-14

    def test_max_iter_validated(self):
        with pytest.raises(nk.DomainError):
            nk.extreme_eigs_from_grad(lambda z: z, np.zeros(2), max_iter=0)
