"""Convolution kernel backend, selected once at import.

The compiled :mod:`dptn._kernels` extension is used when it imports; otherwise
the numpy versions in :mod:`dptn._kernels_py` are used. Setting the
environment variable ``DPTN_KERNELS=numpy`` forces the fallback.
"""
import os

import numpy as np

from dptn import _kernels_py

try:
    from dptn import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"numpy": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = "numpy" if os.environ.get("DPTN_KERNELS") == "numpy" or _compiled is None else "cython"


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name


def im2col(x, kh, kw, stride, pad):
    x = np.ascontiguousarray(x)
    return _BACKENDS[_active].im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    N, C, H, W = shape
    cols = np.ascontiguousarray(cols)
    return _BACKENDS[_active].col2im(cols, N, C, H, W, kh, kw, stride, pad)
