import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entrgi.core import (entropy, finite_diff_grad, inverse_cdf_sample, jacobian_vector_product, normalized_entropy,
                         relative_error, softmax_jacobian, softmax_temp)
from entrgi.errors import InvalidInputError, InvalidParameterError, OracleFailureError

logit_vectors = arrays(np.float64, st.integers(2, 40), elements=st.floats(-30, 30))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_temp([0, 0, 0, 0], 1.0), [0.25] * 4, atol=1e-15)

    def test_two_logits(self):
        e = np.e / (np.e + 1.0)
        np.testing.assert_allclose(softmax_temp([1.0, 0.0]), [0.7311, 0.2689], atol=1e-4)
        np.testing.assert_allclose(softmax_temp([1.0, 0.0]), [e, 1 - e], atol=1e-15)

    def test_low_temperature_selects_argmax(self):
        np.testing.assert_allclose(softmax_temp([3.0, 1.0], 0.01), [1.0, 0.0], atol=1e-9)

    def test_large_logits_do_not_overflow(self):
        q = softmax_temp([1000.0, 999.0, -1000.0], 0.1)
        assert np.all(np.isfinite(q))
        assert q.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0, np.inf, np.nan])
    def test_bad_tau(self, tau):
        with pytest.raises(InvalidParameterError):
            softmax_temp([0.0, 1.0], tau)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_logits(self, bad):
        with pytest.raises(InvalidInputError):
            softmax_temp([0.0, bad])

    def test_row_wise(self):
        rows = np.array([[0.0, 0.0], [1.0, 0.0]])
        q = softmax_temp(rows)
        np.testing.assert_allclose(q[0], [0.5, 0.5])
        np.testing.assert_allclose(q[1], softmax_temp(rows[1]))

    @given(logit_vectors, st.floats(0.05, 2.0), st.floats(-50, 50))
    def test_normalised_and_shift_invariant(self, x, tau, c):
        q = softmax_temp(x, tau)
        assert np.all(q >= 0)
        assert abs(q.sum() - 1.0) <= 1e-9
        np.testing.assert_allclose(softmax_temp(x + c, tau), q, atol=1e-9)

    @given(logit_vectors, st.floats(0.05, 2.0))
    def test_temperature_is_logit_scaling(self, x, tau):
        np.testing.assert_allclose(softmax_temp(x, tau), softmax_temp(x / tau, 1.0), atol=1e-12)


class TestEntropy:
    def test_point_mass(self):
        assert entropy([1.0, 0.0, 0.0]) == 0.0

    def test_uniform(self):
        assert entropy([0.25] * 4) == pytest.approx(np.log(4), abs=1e-12)
        assert entropy([0.25] * 4) == pytest.approx(1.386294, abs=1e-6)

    def test_two_point(self):
        assert entropy([0.7311, 0.2689]) == pytest.approx(0.5822, abs=1e-3)

    def test_row_wise_matches_scalar(self):
        q = np.array([[1.0, 0.0], [0.5, 0.5]])
        np.testing.assert_allclose(entropy(q), [0.0, np.log(2)])

    @given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 10)))
    def test_bounds_and_uniform_maximum(self, raw):
        if raw.sum() <= 0:
            return
        q = raw / raw.sum()
        h = entropy(q)
        K = q.size
        assert 0.0 <= h <= np.log(K) + 1e-12
        assert h <= entropy(np.full(K, 1.0 / K)) + 1e-12

    def test_normalized(self):
        assert normalized_entropy([0.5, 0.5]) == pytest.approx(1.0)
        assert normalized_entropy([1.0, 0.0]) == 0.0
        with pytest.raises(InvalidInputError):
            normalized_entropy([1.0])


class TestJacobian:
    def test_half_half(self):
        np.testing.assert_allclose(softmax_jacobian([0.5, 0.5], 1.0), [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)

    def test_saturated_is_zero(self):
        assert np.all(softmax_jacobian([1.0, 0.0], 1.0) == 0.0)

    def test_tau_two_halves(self):
        q = softmax_temp([0.3, -1.2, 2.0])
        np.testing.assert_array_equal(softmax_jacobian(q, 2.0), softmax_jacobian(q, 1.0) / 2.0)

    def test_bad_tau(self):
        with pytest.raises(InvalidParameterError):
            softmax_jacobian([0.5, 0.5], 0.0)

    @given(logit_vectors, st.floats(0.05, 2.0))
    def test_symmetric_zero_sum(self, x, tau):
        J = softmax_jacobian(softmax_temp(x, tau), tau)
        np.testing.assert_allclose(J, J.T, atol=1e-9)
        np.testing.assert_allclose(J.sum(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(J.sum(axis=1), 0.0, atol=1e-9)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            K = int(rng.integers(2, 51))
            tau = float(rng.uniform(0.05, 2.0))
            x = rng.normal(size=K)
            J = softmax_jacobian(softmax_temp(x, tau), tau)
            for i in range(K):
                fd = finite_diff_grad(lambda v: softmax_temp(v, tau)[i], x, h=1e-5 * tau)
                if np.linalg.norm(J[i]) > 1e-8:
                    worst = max(worst, relative_error(J[i], fd))
        assert worst <= 1e-5

    def test_batched_stack(self):
        q = softmax_temp(np.array([[0.0, 1.0, 2.0], [1.0, 1.0, 1.0]]))
        J = softmax_jacobian(q, 0.5)
        assert J.shape == (2, 3, 3)
        np.testing.assert_array_equal(J[1], softmax_jacobian(q[1], 0.5))

    @given(logit_vectors, st.floats(0.05, 2.0), st.integers(0, 2**32 - 1))
    def test_jvp_matches_explicit(self, x, tau, seed):
        q = softmax_temp(x, tau)
        v = np.random.default_rng(seed).normal(size=x.size)
        np.testing.assert_allclose(jacobian_vector_product(q, v, tau), v @ softmax_jacobian(q, tau),
                                   atol=1e-10 * (1 + np.abs(v).max()) / tau)


class TestFiniteDiff:
    def test_square(self):
        assert finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-4)[0] == pytest.approx(6.0, abs=1e-6)

    def test_linear(self):
        np.testing.assert_allclose(finite_diff_grad(lambda x: float(np.sum(x)), np.array([1.0, 2.0])), [1, 1],
                                   atol=1e-8)

    def test_any_shape(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(finite_diff_grad(lambda v: float(np.sum(v ** 2)), x), 2 * x, atol=1e-6)

    def test_does_not_mutate_input(self):
        x = np.array([1.0, 2.0])
        finite_diff_grad(lambda v: float(v @ v), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    def test_non_finite_reports_coordinate(self):
        def f(v):
            return np.inf if v[2] > 0.5 else 0.0

        with pytest.raises(OracleFailureError) as info:
            finite_diff_grad(f, np.array([0.0, 0.0, 0.5]))
        assert info.value.index == 2

    def test_bad_step(self):
        with pytest.raises(InvalidParameterError):
            finite_diff_grad(lambda v: 0.0, np.zeros(2), 0.0)


class TestInverseCdf:
    def test_one_hot(self):
        q = np.zeros(10)
        q[7] = 1.0
        u = np.linspace(0, 1, 50, endpoint=False)
        assert np.all(inverse_cdf_sample(np.broadcast_to(q, (50, 10)), u) == 7)

    def test_skips_zero_mass(self):
        q = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
        u = np.array([0.0, 0.25, 0.4999, 0.5, 0.99999])
        assert inverse_cdf_sample(np.broadcast_to(q, (5, 5)), u).tolist() == [1, 1, 1, 3, 3]

    def test_multinomial_frequencies(self):
        rng = np.random.default_rng(3)
        q = rng.dirichlet(np.ones(6))
        n = 100_000
        counts = np.bincount(inverse_cdf_sample(np.broadcast_to(q, (n, 6)), rng.random(n)), minlength=6)
        sigma = np.sqrt(n * q * (1 - q))
        assert np.all(np.abs(counts - n * q) <= 4 * sigma)
