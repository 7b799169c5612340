import numpy as np
import pytest
from hypothesis import given, strategies as st

from pnetlab import kernels
from pnetlab.kernels import _numpy_impl as npk

cq = pytest.importorskip("pnetlab.kernels._cquant")


def test_rescale_ties_to_even():
    v = np.array([1, 2, 3, 5, 6, 7, -1, -2, -3, -5, -6, -7], dtype=np.int64)  # /2 with shift 1 -> ties at odd
    np.testing.assert_array_equal(npk.rescale(v, 1), np.rint(v / 2).astype(np.int64))
    np.testing.assert_array_equal(cq.rescale(v, 1), np.rint(v / 2).astype(np.int64))


@given(st.lists(st.integers(-(2**40), 2**40), min_size=1, max_size=50), st.integers(0, 20))
def test_rescale_matches_rint(vals, shift):
    v = np.array(vals, dtype=np.int64)
    want = np.rint(v / float(1 << shift)).astype(np.int64)
    np.testing.assert_array_equal(npk.rescale(v, shift), want)
    np.testing.assert_array_equal(cq.rescale(v, shift), want)


def test_saturate_counts():
    v, n = npk.saturate(np.array([-200, -128, 0, 127, 300], dtype=np.int64), 8)
    np.testing.assert_array_equal(v, [-128, -128, 0, 127, 127])
    assert n == 2


def _ints(rng, shape, lim):
    return rng.integers(-lim, lim + 1, size=shape, dtype=np.int64)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_backends_agree(rng, stride, pad):
    x = _ints(rng, (3, 9, 9, 2), 300)
    w = _ints(rng, (4, 3, 3, 2), 100)
    b = _ints(rng, (4,), 10_000)
    for bits in (12, 32):
        a = npk.conv2d(x, w, b, stride, pad, 6, bits)
        c = cq.conv2d(x, w, b, stride, pad, 6, bits)
        np.testing.assert_array_equal(a[0], c[0])
        assert a[1] == c[1]


def test_conv_against_loops(rng):
    x = _ints(rng, (1, 5, 5, 2), 50)
    w = _ints(rng, (3, 3, 3, 2), 50)
    b = _ints(rng, (3,), 100)
    out, _ = npk.conv2d(x, w, b, 1, 1, 0, 62)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                assert out[0, i, j, o] == int((xp[0, i : i + 3, j : j + 3, :] * w[o]).sum() + b[o])


def test_linear_square_avgpool_backends_agree(rng):
    x = _ints(rng, (5, 40), 1000)
    w = _ints(rng, (7, 40), 100)
    b = _ints(rng, (7,), 10_000)
    for bits in (14, 32):
        a, c = npk.linear(x, w, b, 5, bits), cq.linear(x, w, b, 5, bits)
        np.testing.assert_array_equal(a[0], c[0])
        assert a[1] == c[1]
        a, c = npk.square(x, 7, bits), cq.square(x, 7, bits)
        np.testing.assert_array_equal(a[0], c[0])
        assert a[1] == c[1]
    x4 = _ints(rng, (2, 7, 7, 3), 1000)
    a, c = npk.avgpool(x4, 2, 64, 8, 20), cq.avgpool(x4, 2, 64, 8, 20)
    np.testing.assert_array_equal(a[0], c[0])
    assert a[1] == c[1]


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "numpy")


def test_forward_identical_across_backends(small_pnet, rng, monkeypatch):
    from pnetlab.pnet_core import forward_batch

    x = rng.random((4, 28, 28, 1))
    ref = forward_batch(small_pnet, x)
    for name in ("conv2d", "linear", "square", "avgpool"):
        monkeypatch.setattr(kernels, name, getattr(npk, name))
    alt = forward_batch(small_pnet, x)
    np.testing.assert_array_equal(ref[0], alt[0])
    assert ref[1] == alt[1]
