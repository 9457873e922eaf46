import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from isingreg.errors import DimensionError, NumericError, ParameterError
from isingreg.tensor import RngStream, log_softmax_stable, matmul, rng_draw, softmax_stable


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul(np.eye(2), np.array([[1.0, 2], [3, 4]])), [[1, 2], [3, 4]])

    def test_projector(self):
        out = matmul(np.array([[1.0, 0], [0, 0]]), np.array([[5.0, 6], [7, 8]]))
        np.testing.assert_array_equal(out, [[5, 6], [0, 0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_deterministic(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        assert np.array_equal(matmul(a, b), matmul(a.copy(), b.copy()))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_stable(np.zeros(3)), [1 / 3] * 3, atol=1e-15)

    def test_saturation(self):
        np.testing.assert_allclose(softmax_stable(np.array([1000.0, 0, 0])), [1, 0, 0], atol=1e-12)

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax_stable(x), np.exp(x) / np.exp(x).sum(), atol=1e-12, rtol=0)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            softmax_stable(np.array([np.nan, 0.0]))
        with pytest.raises(NumericError):
            softmax_stable(np.array([np.inf, 0.0]))

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                      elements=st.floats(-700, 700)))
    def test_rows_sum_to_one(self, x):
        p = softmax_stable(x)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.exp(log_softmax_stable(x)), p, atol=1e-12)


class TestRng:
    def test_bernoulli_edges(self):
        r = RngStream(0, "x")
        assert rng_draw(r, "bernoulli", 1000, p=0.0).sum() == 0
        assert rng_draw(r, "bernoulli", 1000, p=1.0).sum() == 1000

    def test_bernoulli_bad_p(self):
        with pytest.raises(ParameterError):
            rng_draw(RngStream(0), "bernoulli", 3, p=1.5)
        with pytest.raises(ParameterError):
            rng_draw(RngStream(0), "bernoulli", 3, p=-0.1)

    def test_gaussian_moments(self):
        x = rng_draw(RngStream(7, "g"), "gaussian", 10**6, mu=0.0, sigma=1.0)
        assert abs(x.mean()) < 0.005
        assert 0.99 <= x.var(ddof=1) <= 1.01

    def test_negative_sigma(self):
        with pytest.raises(ParameterError):
            rng_draw(RngStream(0), "gaussian", 3, sigma=-1.0)

    def test_unknown_distribution(self):
        with pytest.raises(ParameterError):
            rng_draw(RngStream(0), "cauchy", 3)

    def test_reproducible_and_independent(self):
        a = RngStream(3, "mask").uniform(10)
        # consuming another stream must not perturb this one
        other = RngStream(3, "weight")
        other.uniform(1000)
        b = RngStream(3, "mask").uniform(10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, RngStream(3, "weight").uniform(10))
        assert not np.array_equal(a, RngStream(4, "mask").uniform(10))

    def test_state_round_trip(self):
        r = RngStream(11, "s")
        r.uniform(17)
        state = r.get_state()
        x = r.uniform(5)
        r2 = RngStream(0, "other")
        r2.set_state(state)
        assert np.array_equal(r2.uniform(5), x)

    def test_substreams_distinct(self):
        base = RngStream(1, "eval")
        assert not np.array_equal(base.substream("a").uniform(4), base.substream("b").uniform(4))
        assert np.array_equal(base.substream("a").uniform(4), RngStream(1, "eval").substream("a").uniform(4))
