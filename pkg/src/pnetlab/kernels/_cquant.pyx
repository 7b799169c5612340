# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled integer kernels; bit-exact twin of ``_numpy_impl``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()


cdef inline int64_t _rescale(int64_t v, int shift) nogil:
    cdef int64_t q, r, half
    if shift == 0:
        return v
    q = v >> shift
    r = v & ((<int64_t>1 << shift) - 1)
    half = <int64_t>1 << (shift - 1)
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


cdef inline int64_t _sat(int64_t v, int64_t lo, int64_t hi, int64_t* count) nogil:
    if v > hi:
        count[0] += 1
        return hi
    if v < lo:
        count[0] += 1
        return lo
    return v


def rescale(v, int shift):
    cdef int64_t[::1] flat = np.ascontiguousarray(v, dtype=np.int64).ravel().copy()
    cdef Py_ssize_t i
    for i in range(flat.shape[0]):
        flat[i] = _rescale(flat[i], shift)
    return np.asarray(flat).reshape(np.shape(v))


def conv2d(x, w, bias, int stride, int pad, int shift, int bits):
    cdef int64_t[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.int64)
    cdef int64_t[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.int64)
    cdef Py_ssize_t N = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3]
    cdef Py_ssize_t O = wv.shape[0], KH = wv.shape[1], KW = wv.shape[2]
    cdef Py_ssize_t HO = (H + 2 * pad - KH) // stride + 1
    cdef Py_ssize_t WO = (W + 2 * pad - KW) // stride + 1
    cdef int64_t[::1] bv
    cdef bint has_bias = bias is not None
    if has_bias:
        bv = np.ascontiguousarray(bias, dtype=np.int64)
    out = np.empty((N, HO, WO, O), dtype=np.int64)
    cdef int64_t[:, :, :, ::1] ov = out
    cdef int64_t hi = (<int64_t>1 << (bits - 1)) - 1
    cdef int64_t lo = -(<int64_t>1 << (bits - 1))
    cdef int64_t nsat = 0, acc
    cdef Py_ssize_t n, i, j, o, ki, kj, c, yi, xj
    with nogil:
        for n in range(N):
            for i in range(HO):
                for j in range(WO):
                    for o in range(O):
                        acc = 0
                        for ki in range(KH):
                            yi = i * stride + ki - pad
                            if yi < 0 or yi >= H:
                                continue
                            for kj in range(KW):
                                xj = j * stride + kj - pad
                                if xj < 0 or xj >= W:
                                    continue
                                for c in range(C):
                                    acc += xv[n, yi, xj, c] * wv[o, ki, kj, c]
                        if has_bias:
                            acc += bv[o]
                        ov[n, i, j, o] = _sat(_rescale(acc, shift), lo, hi, &nsat)
    return out, int(nsat)


def linear(x, w, bias, int shift, int bits):
    cdef int64_t[:, ::1] xv = np.ascontiguousarray(x, dtype=np.int64)
    cdef int64_t[:, ::1] wv = np.ascontiguousarray(w, dtype=np.int64)
    cdef Py_ssize_t N = xv.shape[0], I = xv.shape[1], O = wv.shape[0]
    cdef int64_t[::1] bv
    cdef bint has_bias = bias is not None
    if has_bias:
        bv = np.ascontiguousarray(bias, dtype=np.int64)
    out = np.empty((N, O), dtype=np.int64)
    cdef int64_t[:, ::1] ov = out
    cdef int64_t hi = (<int64_t>1 << (bits - 1)) - 1
    cdef int64_t lo = -(<int64_t>1 << (bits - 1))
    cdef int64_t nsat = 0, acc
    cdef Py_ssize_t n, o, k
    with nogil:
        for n in range(N):
            for o in range(O):
                acc = 0
                for k in range(I):
                    acc += xv[n, k] * wv[o, k]
                if has_bias:
                    acc += bv[o]
                ov[n, o] = _sat(_rescale(acc, shift), lo, hi, &nsat)
    return out, int(nsat)


def square(x, int shift, int bits):
    shape = np.shape(x)
    cdef int64_t[::1] xv = np.ascontiguousarray(x, dtype=np.int64).ravel()
    out = np.empty(xv.shape[0], dtype=np.int64)
    cdef int64_t[::1] ov = out
    cdef int64_t hi = (<int64_t>1 << (bits - 1)) - 1
    cdef int64_t lo = -(<int64_t>1 << (bits - 1))
    cdef int64_t nsat = 0
    cdef Py_ssize_t i
    with nogil:
        for i in range(xv.shape[0]):
            ov[i] = _sat(_rescale(xv[i] * xv[i], shift), lo, hi, &nsat)
    return out.reshape(shape), int(nsat)


def avgpool(x, int k, int64_t mult, int shift, int bits):
    cdef int64_t[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.int64)
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[3]
    cdef Py_ssize_t HO = xv.shape[1] // k, WO = xv.shape[2] // k
    out = np.empty((N, HO, WO, C), dtype=np.int64)
    cdef int64_t[:, :, :, ::1] ov = out
    cdef int64_t hi = (<int64_t>1 << (bits - 1)) - 1
    cdef int64_t lo = -(<int64_t>1 << (bits - 1))
    cdef int64_t nsat = 0, s
    cdef Py_ssize_t n, i, j, c, a, b
    with nogil:
        for n in range(N):
            for i in range(HO):
                for j in range(WO):
                    for c in range(C):
                        s = 0
                        for a in range(k):
                            for b in range(k):
                                s += xv[n, i * k + a, j * k + b, c]
                        ov[n, i, j, c] = _sat(_rescale(s * mult, shift), lo, hi, &nsat)
    return out, int(nsat)
