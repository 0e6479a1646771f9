import jax
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import random_spd
from gpssm.gauss import (
    GaussianMoments,
    NonConvergence,
    NotPositiveDefinite,
    PsdMatrix,
    chol,
    gauss_kl,
    mvn_logpdf,
    mvn_transform,
    quad_1d,
)


def moments(mean, cov):
    return GaussianMoments(np.asarray(mean, dtype=float), chol(np.asarray(cov, dtype=float)))


class TestChol:
    def test_identity(self):
        L = chol(np.eye(3))
        np.testing.assert_array_equal(L.factor, np.eye(3))
        assert L.jitter == 0.0

    def test_diagonal(self):
        np.testing.assert_allclose(chol(np.diag([4.0, 9.0])).factor, np.diag([2.0, 3.0]), atol=1e-15)

    def test_reconstructs_2x2(self):
        M = np.array([[2.0, 1.0], [1.0, 2.0]])
        L = np.asarray(chol(M).factor)
        np.testing.assert_allclose(L @ L.T, M, rtol=1e-12, atol=0)

    def test_rank_deficient_gets_jitter(self):
        v = np.array([1.0, 2.0, 3.0])
        M = np.outer(v, v)
        out = chol(M)
        assert out.jitter > 0
        L = np.asarray(out.factor)
        assert np.all(np.diag(L) > 0)
        np.testing.assert_allclose(L @ L.T, M + out.jitter * np.eye(3), atol=1e-10 * np.abs(M).max())

    def test_negative_definite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            chol(-np.eye(2))

    def test_asymmetric_raises(self):
        with pytest.raises(ValueError):
            chol(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_batched(self, rng):
        Ms = np.stack([random_spd(rng, 3) for _ in range(4)])
        Ls = np.asarray(chol(Ms).factor)
        np.testing.assert_allclose(Ls @ np.swapaxes(Ls, -1, -2), Ms, atol=1e-12)

    def test_traceable_under_jit(self):
        f = jax.jit(lambda m: chol(m).factor)
        np.testing.assert_allclose(f(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)

    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_reconstruction_property(self, n, seed):
        M = random_spd(np.random.default_rng(seed), n)
        out = chol(M)
        L = np.asarray(out.factor)
        assert np.all(np.diag(L) > 0)
        err = np.abs(L @ L.T - (M + out.jitter * np.eye(n))).max()
        assert err <= 1e-10 * np.abs(M).max()


class TestGaussKL:
    def test_same_distribution(self, rng):
        q = moments(rng.normal(size=3), random_spd(rng, 3))
        assert abs(float(gauss_kl(q, q))) < 1e-12

    def test_unit_shift(self):
        assert float(gauss_kl(moments([1.0], [[1.0]]), moments([0.0], [[1.0]]))) == pytest.approx(0.5, abs=1e-14)

    def test_matches_scipy_free_closed_form(self, rng):
        # dense textbook formula with explicit inverse
        Sq, Sp = random_spd(rng, 3), random_spd(rng, 3)
        mq, mp = rng.normal(size=3), rng.normal(size=3)
        Pinv = np.linalg.inv(Sp)
        d = mp - mq
        ref = 0.5 * (np.trace(Pinv @ Sq) + d @ Pinv @ d - 3 + np.log(np.linalg.det(Sp) / np.linalg.det(Sq)))
        assert float(gauss_kl(moments(mq, Sq), moments(mp, Sp))) == pytest.approx(ref, rel=1e-10)

    def test_monte_carlo(self, rng):
        Sq, Sp = random_spd(rng, 3), random_spd(rng, 3)
        mq, mp = rng.normal(size=3), rng.normal(size=3)
        x = rng.multivariate_normal(mq, Sq, size=1_000_000)
        diff = stats.multivariate_normal(mq, Sq).logpdf(x) - stats.multivariate_normal(mp, Sp).logpdf(x)
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        kl = float(gauss_kl(moments(mq, Sq), moments(mp, Sp)))
        assert abs(kl - diff.mean()) <= 3 * se

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gauss_kl(moments([0.0], [[1.0]]), moments([0.0, 0.0], np.eye(2)))

    @given(st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_nonnegative(self, n, seed):
        r = np.random.default_rng(seed)
        q = moments(r.normal(size=n), random_spd(r, n))
        p = moments(r.normal(size=n), random_spd(r, n))
        assert float(gauss_kl(q, p)) >= -1e-12
        assert abs(float(gauss_kl(q, q))) <= 1e-9


class TestLogpdf:
    def test_standard_normal_mode(self):
        val = float(mvn_logpdf(np.zeros(1), moments([0.0], [[1.0]])))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)

    def test_at_mean(self, rng):
        S = random_spd(rng, 3)
        m = rng.normal(size=3)
        ref = -0.5 * np.log(np.linalg.det(2 * np.pi * S))
        assert float(mvn_logpdf(m, moments(m, S))) == pytest.approx(ref, abs=1e-12)

    def test_dense_inverse_2d(self, rng):
        S = random_spd(rng, 2)
        m, x = rng.normal(size=2), rng.normal(size=2)
        d = x - m
        ref = -0.5 * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(S)) + d @ np.linalg.inv(S) @ d)
        assert float(mvn_logpdf(x, moments(m, S))) == pytest.approx(ref, abs=1e-10)


class TestTransform:
    def test_zero_noise(self, rng):
        g = moments(rng.normal(size=3), random_spd(rng, 3))
        np.testing.assert_array_equal(mvn_transform(g, np.zeros(3)), g.mean)

    def test_identity_cov(self, rng):
        m, e = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(mvn_transform(GaussianMoments(m, PsdMatrix.identity(3)), e), m + e, atol=1e-15)

    def test_sample_mean(self, rng):
        S = random_spd(rng, 2)
        g = moments([1.0, -2.0], S)
        E = rng.standard_normal((100_000, 2))
        X = np.asarray(jax.vmap(lambda e: mvn_transform(g, e))(E))
        se = np.sqrt(np.diag(S) / len(E))
        assert np.all(np.abs(X.mean(0) - g.mean) <= 4 * se)

    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_affine(self, seed, a, b):
        r = np.random.default_rng(seed)
        g = moments(r.normal(size=2), random_spd(r, 2))
        e1, e2 = r.normal(size=2), r.normal(size=2)
        lhs = np.asarray(mvn_transform(g, a * e1 + b * e2)) - g.mean
        rhs = a * (np.asarray(mvn_transform(g, e1)) - g.mean) + b * (np.asarray(mvn_transform(g, e2)) - g.mean)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestQuad:
    def test_normal_density(self):
        assert quad_1d(stats.norm.pdf, (-10, 10)) == pytest.approx(1.0, abs=1e-8)

    def test_second_moment(self):
        assert quad_1d(lambda x: x * x * stats.norm.pdf(x), (-10, 10)) == pytest.approx(1.0, abs=1e-6)

    def test_mixture(self):
        f = lambda x: 0.3 * stats.norm.pdf(x, -1, 0.5) + 0.7 * stats.norm.pdf(x, 2, 1)  # noqa: E731
        assert quad_1d(f, (-10, 12)) == pytest.approx(1.0, abs=1e-6)

    def test_nonconvergence(self):
        with pytest.raises(NonConvergence):
            quad_1d(lambda x: np.sin(1 / x) / x, (1e-6, 1.0), tol=1e-14, limit=5)
