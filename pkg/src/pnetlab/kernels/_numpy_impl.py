"""Pure numpy integer kernels.

Every kernel takes int64 arrays in channels-last layout, accumulates in
int64, adds the bias, rescales by an arithmetic right shift with
round-half-even and saturates to a signed ``bits``-wide range.  Each returns
``(out, n_saturated)``.  The compiled twin in ``_cquant.pyx`` must agree
bit for bit.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def rescale(v: np.ndarray, shift: int) -> np.ndarray:
    """Divide by 2**shift, rounding to nearest with ties to even."""
    v = np.asarray(v, dtype=np.int64)
    if shift == 0:
        return v.copy()
    q = v >> shift
    r = v & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    q += ((r > half) | ((r == half) & ((q & 1) == 1))).astype(np.int64)
    return q


def saturate(v: np.ndarray, bits: int) -> tuple[np.ndarray, int]:
    hi = (1 << (bits - 1)) - 1
    lo = -(1 << (bits - 1))
    n = int(np.count_nonzero((v > hi) | (v < lo)))
    if n:
        v = np.clip(v, lo, hi)
    return v, n


def _finish(acc, bias, shift, bits):
    if bias is not None:
        acc = acc + bias
    return saturate(rescale(acc, shift), bits)


def conv2d(x, w, bias, stride: int, pad: int, shift: int, bits: int):
    """x: (N,H,W,C); w: (O,kh,kw,C); bias: (O,) at the product scale."""
    n, h, wd, c = x.shape
    o, kh, kw, _ = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # win: (N,Ho,Wo,C,kh,kw) -> (N*Ho*Wo, kh*kw*C) matching w's layout
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    acc = cols @ w.reshape(o, -1).T
    out, nsat = _finish(acc, bias, shift, bits)
    return out.reshape(n, ho, wo, o), nsat


def linear(x, w, bias, shift: int, bits: int):
    """x: (N,in); w: (out,in)."""
    return _finish(x @ w.T, bias, shift, bits)


def square(x, shift: int, bits: int):
    return _finish(x * x, None, shift, bits)


def avgpool(x, k: int, mult: int, shift: int, bits: int):
    """Non-overlapping k x k window sum times the quantized 1/k^2 multiplier."""
    n, h, w, c = x.shape
    ho, wo = h // k, w // k
    s = x[:, : ho * k, : wo * k].reshape(n, ho, k, wo, k, c).sum(axis=(2, 4))
    return _finish(s * mult, None, shift, bits)
