"""Kernel backend selection.

Imports the compiled extension when present; falls back to the numpy
reference implementation otherwise.  HA2G_PURE_PYTHON=1 forces the
fallback (useful for benchmarking and for debugging kernel parity).
"""

import os

import numpy as np

from . import _ref

if os.environ.get("HA2G_PURE_PYTHON"):
    _impl = _ref
else:
    try:
        from . import _fast as _impl
    except ImportError:
        _impl = _ref

BACKEND = _impl.BACKEND


def _c2(a):
    return np.ascontiguousarray(a)


def gru_gates_forward(gx, gh, h_prev):
    return _impl.gru_gates_forward(_c2(gx), _c2(gh), _c2(h_prev))


def gru_gates_backward(grad, h_prev, r, z, n, gh_n):
    return _impl.gru_gates_backward(_c2(grad), _c2(h_prev), r, z, n, _c2(gh_n))


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps):
    # param/m/v are mutated in place; they are owned contiguous buffers
    _impl.adam_update(param.ravel(), _c2(grad).ravel(), m.ravel(), v.ravel(),
                      t, lr, beta1, beta2, eps)


def huber_forward(diff, delta):
    d = _c2(diff)
    return np.asarray(_impl.huber_forward(d.ravel(), delta)).reshape(d.shape)


def huber_backward(diff, delta):
    d = _c2(diff)
    return np.asarray(_impl.huber_backward(d.ravel(), delta)).reshape(d.shape)
