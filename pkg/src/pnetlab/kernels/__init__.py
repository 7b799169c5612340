"""Integer inference kernels with a compiled fast path.

The Cython extension ``_cquant`` is used when it was built; otherwise the
numpy implementation is used.  Set ``PNETLAB_KERNELS=numpy`` to force the
fallback (the test suite runs both and compares them bit for bit).
"""
from __future__ import annotations

import os

from . import _numpy_impl

try:
    from . import _cquant
except ImportError:  # extension not built
    _cquant = None

if _cquant is not None and os.environ.get("PNETLAB_KERNELS", "").lower() != "numpy":
    _impl = _cquant
    BACKEND = "cython"
else:
    _impl = _numpy_impl
    BACKEND = "numpy"

conv2d = _impl.conv2d
linear = _impl.linear
square = _impl.square
avgpool = _impl.avgpool
rescale = _impl.rescale
saturate = _numpy_impl.saturate

__all__ = ["BACKEND", "conv2d", "linear", "square", "avgpool", "rescale", "saturate"]
