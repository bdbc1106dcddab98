import math

import numpy as np
import numpy.testing as npt
import pytest

from dgtn import numerics
from dgtn.errors import NonFinite, Singular, ZeroDegree


class TestSoftmaxRows:
    def test_symmetry_zero_row(self):
        out = numerics.softmax_rows(np.array([[0.0, 0.0, 0.0]]))
        npt.assert_allclose(out, np.full((1, 3), 1.0 / 3.0), rtol=0, atol=1e-15)

    def test_large_equal_logits_no_overflow(self):
        out = numerics.softmax_rows(np.array([[1000.0, 1000.0]]))
        assert np.isfinite(out).all()
        npt.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_hand_value(self):
        # exp/sum oracle: softmax([0, ln 3]) = [1/4, 3/4]
        out = numerics.softmax_rows(np.array([[0.0, math.log(3.0)]]))
        npt.assert_allclose(out, [[0.25, 0.75]], atol=1e-14)

    def test_rows_sum_to_one_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m = rng.standard_normal((rng.integers(1, 6), rng.integers(1, 6))) * 10
            out = numerics.softmax_rows(m)
            npt.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
            assert (out > 0).all() and (out < 1 + 1e-15).all()


class TestGelu:
    def test_zero(self):
        assert numerics.gelu(np.array([0.0]))[0] == 0.0

    def test_large_input_identity(self):
        x = np.array([10.0])
        assert abs(numerics.gelu(x)[0] - 10.0) < 1e-9

    def test_unit_value_erf_oracle(self):
        # 1 * Phi(1) with Phi from erf
        expected = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        npt.assert_allclose(numerics.gelu(np.array([1.0]))[0], expected, rtol=1e-15)
        npt.assert_allclose(expected, 0.8413447460685429, rtol=1e-12)

    def test_grad_matches_finite_differences(self):
        xs = np.linspace(-3, 3, 13)
        g = numerics.gelu_grad(xs)
        eps = 1e-6
        fd = (numerics.gelu(xs + eps) - numerics.gelu(xs - eps)) / (2 * eps)
        npt.assert_allclose(g, fd, atol=1e-9)


class TestRbfExpand:
    def test_center_hit(self):
        out = numerics.rbf_expand(2.0, np.array([0.0, 2.0, 4.0]), 1.0)
        assert out[1] == 1.0

    def test_large_gamma_vanishes(self):
        out = numerics.rbf_expand(1.0, np.array([0.0, 2.0]), 1e6)
        assert (out < 1e-300).all()

    def test_direct_evaluation(self):
        out = numerics.rbf_expand(1.0, np.array([0.0, 2.0]), 1.0)
        npt.assert_allclose(out, [math.exp(-1.0), math.exp(-1.0)], rtol=1e-15)

    def test_invalid_gamma(self):
        with pytest.raises(ValueError):
            numerics.rbf_expand(1.0, np.array([0.0]), 0.0)


class TestSymNormalize:
    def test_identity(self):
        npt.assert_allclose(numerics.sym_normalize(np.eye(3)), np.eye(3))

    def test_two_node_hand_solve(self):
        out = numerics.sym_normalize(np.array([[0.0, 2.0], [2.0, 0.0]]))
        npt.assert_allclose(out, [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)

    def test_all_ones(self):
        out = numerics.sym_normalize(np.ones((2, 2)))
        npt.assert_allclose(out, np.full((2, 2), 0.5), atol=1e-15)

    def test_zero_degree_raises(self):
        s = np.zeros((2, 2))
        s[0, 0] = 1.0
        with pytest.raises(ZeroDegree):
            numerics.sym_normalize(s)

    def test_zero_degree_self_loop_injection(self):
        s = np.zeros((2, 2))
        s[0, 0] = 1.0
        out = numerics.sym_normalize(s, self_loops=True)
        npt.assert_allclose(out, np.eye(2))

    def test_spectral_radius_bounded_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 10))
            s = rng.uniform(0, 1, (n, n)) * (rng.random((n, n)) < 0.5)
            s = (s + s.T) / 2
            np.fill_diagonal(s, 1.0)
            sn = numerics.sym_normalize(s)
            lam = np.max(np.abs(np.linalg.eigvalsh(sn)))
            assert lam <= 1 + 1e-8


class TestSpectralRadius:
    def test_identity(self):
        lam, ok = numerics.spectral_radius(np.eye(4))
        assert ok and abs(lam - 1.0) < 1e-10

    def test_diagonal(self):
        lam, ok = numerics.spectral_radius(np.diag([0.3, 0.7]))
        assert ok and abs(lam - 0.7) < 1e-9

    def test_plus_minus_one_pair(self):
        # characteristic polynomial of [[0,1],[1,0]] is x^2 - 1, eigenvalues +-1
        lam, ok = numerics.spectral_radius(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert ok and abs(lam - 1.0) < 1e-9

    def test_agrees_with_eigvalsh(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            m = rng.standard_normal((6, 6))
            m = (m + m.T) / 2
            lam, ok = numerics.spectral_radius(m, iters=5000, tol=1e-13)
            ref = np.max(np.abs(np.linalg.eigvalsh(m)))
            assert ok
            npt.assert_allclose(lam, ref, rtol=1e-6)


class TestSolveLinear:
    def test_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        npt.assert_allclose(numerics.solve_linear(np.eye(3), b), b)

    def test_scalar_matrix(self):
        npt.assert_allclose(numerics.solve_linear(2 * np.eye(2), np.eye(2)), 0.5 * np.eye(2))

    def test_hand_inverse(self):
        a = np.array([[1.0, -0.5], [-0.5, 1.0]])
        x = numerics.solve_linear(a, np.eye(2))
        npt.assert_allclose(x, [[4 / 3, 2 / 3], [2 / 3, 4 / 3]], atol=1e-14)

    def test_residual_contract(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            a = rng.standard_normal((n, n)) + n * np.eye(n)
            b = rng.standard_normal((n, 3))
            x = numerics.solve_linear(a, b)
            assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b)

    def test_singular_raises(self):
        with pytest.raises(Singular):
            numerics.solve_linear(np.zeros((2, 2)), np.eye(2))

    def test_neumann_series_agreement(self):
        # solve_linear((I - beta*Sn), A0) * (1-beta) vs truncated Neumann sum
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            s = rng.uniform(0, 1, (n, n))
            s = (s + s.T) / 2
            np.fill_diagonal(s, 1.0)
            sn = numerics.sym_normalize(s)
            lam = np.max(np.abs(np.linalg.eigvalsh(sn)))
            beta = min(0.85, 0.9 / lam)
            a0 = numerics.softmax_rows(rng.standard_normal((n, n)))
            direct = (1 - beta) * numerics.solve_linear(np.eye(n) - beta * sn, a0)
            acc = np.zeros_like(a0)
            term = a0.copy()
            for _k in range(201):
                acc += term
                term = beta * (sn @ term)
            series = (1 - beta) * acc
            assert np.linalg.norm(direct - series) < 1e-6


class TestFdGradient:
    def test_quadratic(self):
        g = numerics.fd_gradient(lambda v: float(v @ v), np.array([1.0, 2.0]), eps=1e-5)
        npt.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_constant(self):
        g = numerics.fd_gradient(lambda v: 3.14, np.array([1.0, 2.0, 3.0]))
        npt.assert_allclose(g, 0.0, atol=1e-12)

    def test_product(self):
        g = numerics.fd_gradient(lambda v: float(v[0] * v[1]), np.array([3.0, 5.0]), eps=1e-5)
        npt.assert_allclose(g, [5.0, 3.0], atol=1e-6)

    def test_nonfinite_probe(self):
        with pytest.raises(NonFinite):
            numerics.fd_gradient(lambda v: float("nan"), np.array([1.0]))

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            numerics.fd_gradient(lambda v: 0.0, np.array([1.0]), eps=1e-2)
