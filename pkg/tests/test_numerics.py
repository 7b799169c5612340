import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pnetlab.errors import ParameterError, ShapeError
from pnetlab.numerics import (
    child_seeds,
    dct2,
    dct_basis,
    dct_matrix,
    gauss_tail,
    gaussian,
    idct2,
    l2_norm,
    make_rng,
)


def brute_dct2(x):
    """Direct double sum of the orthonormal DCT-II definition."""
    d = x.shape[0]
    alpha = [math.sqrt(1 / d)] + [math.sqrt(2 / d)] * (d - 1)
    v = np.zeros((d, d))
    for m in range(d):
        for n in range(d):
            s = 0.0
            for i in range(d):
                for j in range(d):
                    s += x[i, j] * math.cos(math.pi * (2 * i + 1) * m / (2 * d)) * math.cos(math.pi * (2 * j + 1) * n / (2 * d))
            v[m, n] = alpha[m] * alpha[n] * s
    return v


def test_dct_constant_image():
    np.testing.assert_allclose(dct2(np.ones((2, 2))), [[2, 0], [0, 0]], atol=1e-12)


def test_dct_single_pixel():
    np.testing.assert_allclose(dct2(np.array([[1.0, 0], [0, 0]])), np.full((2, 2), 0.5), atol=1e-12)


def test_dct_1x1():
    assert dct2(np.array([[0.37]]))[0, 0] == pytest.approx(0.37, abs=1e-15)


def test_idct_constant():
    np.testing.assert_allclose(idct2(np.array([[2.0, 0], [0, 0]])), np.ones((2, 2)), atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3, 5, 8])
def test_dct_matches_brute_force(d, rng):
    x = rng.standard_normal((d, d))
    np.testing.assert_allclose(dct2(x), brute_dct2(x), atol=1e-10)


@pytest.mark.parametrize("d,m,n", [(4, 0, 0), (4, 1, 2), (8, 7, 3), (28, 5, 0)])
def test_basis_matches_formula(d, m, n):
    e = np.zeros((d, d))
    e[m, n] = 1.0
    am = math.sqrt((1 if m == 0 else 2) / d)
    an = math.sqrt((1 if n == 0 else 2) / d)
    i, j = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    want = am * an * np.cos(np.pi * (2 * i + 1) * m / (2 * d)) * np.cos(np.pi * (2 * j + 1) * n / (2 * d))
    np.testing.assert_allclose(idct2(e), want, atol=1e-12)
    np.testing.assert_allclose(dct_basis(d, m, n), want, atol=1e-12)


def test_dct_matrix_read_only():
    with pytest.raises(ValueError):
        dct_matrix(4)[0, 0] = 1.0


def test_dct_rejects_non_square():
    with pytest.raises(ShapeError):
        dct2(np.zeros((2, 3)))


@given(st.integers(1, 32).flatmap(lambda d: arrays(np.float64, (d, d), elements=st.floats(-10, 10))))
def test_dct_roundtrip_and_parseval(x):
    np.testing.assert_allclose(idct2(dct2(x)), x, atol=1e-9)
    assert abs(np.linalg.norm(dct2(x)) - np.linalg.norm(x)) <= 1e-9


def test_gaussian_zero_sigma(rng):
    assert not gaussian(rng, 0.0, (3, 4)).any()


def test_gaussian_negative_sigma(rng):
    with pytest.raises(ParameterError):
        gaussian(rng, -0.1, 3)


def test_gaussian_determinism():
    assert np.array_equal(gaussian(make_rng(5), 1.0, 100), gaussian(make_rng(5), 1.0, 100))


def test_gaussian_moments():
    s = gaussian(make_rng(0), 0.1, 1_000_000)
    assert abs(s.mean()) <= 0.001
    assert 0.0995 <= s.std() <= 0.1005


def test_gauss_tail_values():
    assert gauss_tail(0.0, 1.0) == 0.5
    assert gauss_tail(2.0, 4.0) == pytest.approx(0.158655, abs=1e-6)
    assert gauss_tail(50.0, 1.0) == 0.0


def test_gauss_tail_against_scipy():
    from scipy.stats import norm

    for a, var in [(0.1, 0.02), (0.5, 0.02), (1.0, 3.0), (3.0, 0.5)]:
        assert gauss_tail(a, var) == pytest.approx(norm.sf(a / math.sqrt(var)), rel=1e-12)


def test_gauss_tail_monte_carlo():
    # 1 - Phi(1) via 1e7 standard normals
    z = make_rng(11).standard_normal(10_000_000)
    assert gauss_tail(1.0, 1.0) == pytest.approx(float(np.mean(z > 1.0)), abs=5e-4)


@pytest.mark.parametrize("a,var", [(-0.1, 1.0), (0.1, 0.0), (0.1, -1.0)])
def test_gauss_tail_domain(a, var):
    with pytest.raises(ParameterError):
        gauss_tail(a, var)


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 4))
def test_gauss_tail_monotone_in_a(a, b, var):
    lo, hi = sorted((a, b))
    assert gauss_tail(lo, var) >= gauss_tail(hi, var)


@given(st.floats(0, 5), st.floats(0.01, 4), st.floats(0.01, 4))
def test_gauss_tail_monotone_in_variance(a, v1, v2):
    lo, hi = sorted((v1, v2))
    assert gauss_tail(a, lo) <= gauss_tail(a, hi)


def test_l2_norm():
    assert l2_norm(np.zeros(5)) == 0.0
    assert l2_norm([3.0, 4.0]) == 5.0


def test_l2_norm_brute_force(rng):
    t = rng.standard_normal((4, 5, 3))
    assert l2_norm(t) == pytest.approx(math.sqrt(sum(v * v for v in t.ravel())), abs=1e-12)


def test_child_seeds_distinct_and_stable():
    a = child_seeds(3, 5, 1)
    assert a == child_seeds(3, 5, 1)
    assert len(set(a)) == 5
    assert a != child_seeds(3, 5, 2)
    assert a != child_seeds(4, 5, 1)
