"""Convolution kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
implementation in :mod:`migen._pykernels` is selected. ``use_backend``
switches explicitly, which the tests and the benchmark rely on.
"""
import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_active = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "compiled" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name):
    """Select the kernel backend by name; returns the previously active name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    previous = backend_name()
    _active = _BACKENDS[name]
    return previous


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def dwconv_forward(x, w, b):
    return _active.dwconv_forward(_c(x), _c(w), _c(b))


def dwconv_backward(x, w, g):
    return _active.dwconv_backward(_c(x), _c(w), _c(g))


def conv_forward(x, w, b):
    return _active.conv_forward(_c(x), _c(w), _c(b))


def conv_backward(x, w, g):
    return _active.conv_backward(_c(x), _c(w), _c(g))
