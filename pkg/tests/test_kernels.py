import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpssm.gauss import chol
from gpssm.kernels import RbfParams, kern, kern_diag, kern_matrix

UNIT = RbfParams.default(1)


def test_default_params():
    p = RbfParams.default(3)
    assert float(p.variance) == 1.0
    np.testing.assert_array_equal(p.lengthscales, np.ones(3))


def test_zero_distance_gives_variance():
    p = RbfParams(np.array(2.5), np.array([0.7, 1.3]))
    assert float(kern(np.array([0.3, -1.0]), np.array([0.3, -1.0]), p)) == 2.5


def test_unit_distance():
    assert float(kern(np.array([0.0]), np.array([1.0]), UNIT)) == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_far_apart():
    assert float(kern(np.array([0.0]), np.array([100.0]), UNIT)) < 1e-100


def test_single_point_gram():
    np.testing.assert_array_equal(kern_matrix(np.zeros((1, 1)), np.zeros((1, 1)), UNIT), [[1.0]])


def test_three_point_gram():
    K = np.asarray(kern_matrix(np.array([[-1.0], [0.0], [1.0]]), np.array([[-1.0], [0.0], [1.0]]), UNIT))
    e1, e2 = np.exp(-0.5), np.exp(-2.0)
    np.testing.assert_allclose(K, [[1, e1, e2], [e1, 1, e1], [e2, e1, 1]], atol=1e-15)


def test_gram_symmetric_with_diag(rng):
    X = rng.normal(size=(7, 2))
    p = RbfParams(np.array(1.7), np.array([0.5, 2.0]))
    K = np.asarray(kern_matrix(X, X, p))
    np.testing.assert_allclose(K, K.T, atol=0)
    np.testing.assert_allclose(np.diag(K), kern_diag(X, p), atol=1e-15)


def test_ard_matches_scalar_formula(rng):
    p = RbfParams(np.array(0.8), np.array([0.5, 2.0]))
    a, b = rng.normal(size=2), rng.normal(size=2)
    ref = 0.8 * np.exp(-0.5 * np.sum(((a - b) / p.lengthscales) ** 2))
    assert float(kern(a, b, p)) == pytest.approx(ref, rel=1e-14)


@settings(max_examples=8)
@given(st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_gram_factorises_with_small_jitter(n, seed):
    X = np.random.default_rng(seed).uniform(-3, 3, size=(n, 1))
    K = np.asarray(kern_matrix(X, X, UNIT)) + 1e-8 * np.eye(n)
    assert np.all(np.isfinite(chol(K).factor))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10))
def test_translation_invariance(a, b, shift):
    k1 = float(kern(np.array([a]), np.array([b]), UNIT))
    k2 = float(kern(np.array([a + shift]), np.array([b + shift]), UNIT))
    assert k1 == pytest.approx(k2, rel=1e-9, abs=1e-300)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 10))
def test_scale_invariance(a, b, c):
    p = RbfParams(np.array(1.3), np.array([0.8]))
    pc = RbfParams(np.array(1.3), np.array([0.8 * c]))
    k1 = float(kern(np.array([a]), np.array([b]), p))
    k2 = float(kern(np.array([a * c]), np.array([b * c]), pc))
    assert k1 == pytest.approx(k2, rel=1e-9, abs=1e-300)
