"""Deterministic numerics shared by the attack, defense and analysis code.

All real arithmetic here is float64.  The 2-D DCT is the orthonormal DCT-II
written out as a pair of d x d cosine matrices, so ``idct2`` is just the
transpose product and both are exact inverses up to rounding.

Randomness goes through :class:`numpy.random.Generator` backed by PCG64.
Gaussian draws use numpy's ziggurat transform (``standard_normal``); the
PCG64 bit stream and that transform are fixed for a given numpy release.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "ShapeError",
    "ParameterError",
    "make_rng",
    "child_seeds",
    "dct_matrix",
    "dct2",
    "idct2",
    "dct_basis",
    "gaussian",
    "gauss_tail",
    "l2_norm",
]


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    """Return a PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def child_seeds(master_seed: int, n: int, *key: int) -> list[int]:
    """Derive ``n`` independent 64-bit child seeds from a master seed.

    ``key`` namespaces the derivation (e.g. per-image vs per-oracle streams)
    so different consumers never share a stream.
    """
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


@lru_cache(maxsize=64)
def dct_matrix(d: int) -> np.ndarray:
    """Orthonormal DCT-II matrix C with C[m, i] = a_m cos(pi (2i+1) m / 2d)."""
    if d < 1:
        raise ShapeError(f"DCT size must be >= 1, got {d}")
    i = np.arange(d)
    m = i[:, None]
    c = np.cos(np.pi * (2 * i[None, :] + 1) * m / (2 * d))
    alpha = np.full(d, math.sqrt(2.0 / d))
    alpha[0] = math.sqrt(1.0 / d)
    c = alpha[:, None] * c
    c.setflags(write=False)
    return c


def _check_square(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1] or x.shape[0] < 1:
        raise ShapeError(f"expected a non-empty square matrix, got shape {x.shape}")
    return x


def dct2(channel: np.ndarray) -> np.ndarray:
    """2-D DCT of one d x d channel."""
    x = _check_square(channel)
    c = dct_matrix(x.shape[0])
    return c @ x @ c.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct2`."""
    v = _check_square(coeffs)
    c = dct_matrix(v.shape[0])
    return c.T @ v @ c


def dct_basis(d: int, m: int, n: int) -> np.ndarray:
    """Spatial image of the unit DCT coefficient at (m, n); equals idct2(e_mn)."""
    c = dct_matrix(d)
    return np.outer(c[m], c[n])


def gaussian(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    """I.i.d. N(0, sigma^2) samples."""
    if not sigma >= 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(shape, dtype=np.float64)
    return sigma * rng.standard_normal(shape)


def gauss_tail(a: float, variance: float) -> float:
    """P(N(0, variance) > a) for a >= 0.

    Uses ``math.erfc`` (libm, relative error ~1e-16), which avoids the
    cancellation of ``1 - Phi`` in the far tail.
    """
    if a < 0:
        raise ParameterError(f"a must be >= 0, got {a}")
    if not variance > 0:
        raise ParameterError(f"variance must be > 0, got {variance}")
    return 0.5 * math.erfc(a / math.sqrt(2.0 * variance))


def l2_norm(t) -> float:
    """Euclidean norm of the flattened array."""
    return float(np.linalg.norm(np.asarray(t, dtype=np.float64).ravel()))
