"""Backend parity: the compiled kernels must agree with the numpy
reference on both dtypes."""

import numpy as np
import pytest

from ha2g import _kernels
from ha2g._kernels import _ref

try:
    from ha2g._kernels import _fast
except ImportError:
    _fast = None

needs_fast = pytest.mark.skipif(_fast is None, reason="compiled kernels unavailable")


def _tol(dtype):
    return 2e-6 if dtype == np.float32 else 1e-12


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("seed", range(5))
def test_gru_forward_parity(dtype, seed):
    rng = np.random.default_rng(seed)
    b, h = rng.integers(1, 40), rng.integers(1, 70)
    gx = (rng.standard_normal((b, 3 * h)) * 2).astype(dtype)
    gh = (rng.standard_normal((b, 3 * h)) * 2).astype(dtype)
    hp = rng.standard_normal((b, h)).astype(dtype)
    fast = _fast.gru_gates_forward(gx, gh, hp)
    ref = _ref.gru_gates_forward(gx, gh, hp)
    for a, r in zip(fast, ref):
        np.testing.assert_allclose(np.asarray(a), r, atol=_tol(dtype))


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("seed", range(5))
def test_gru_backward_parity(dtype, seed):
    rng = np.random.default_rng(seed)
    b, h = rng.integers(1, 40), rng.integers(1, 70)
    gx = (rng.standard_normal((b, 3 * h)) * 2).astype(dtype)
    gh = (rng.standard_normal((b, 3 * h)) * 2).astype(dtype)
    hp = rng.standard_normal((b, h)).astype(dtype)
    _, r, z, n = (np.asarray(x) for x in _ref.gru_gates_forward(gx, gh, hp))
    grad = rng.standard_normal((b, h)).astype(dtype)
    ghn = np.ascontiguousarray(gh[:, 2 * h:])
    fast = _fast.gru_gates_backward(grad, hp, r, z, n, ghn)
    ref = _ref.gru_gates_backward(grad, hp, r, z, n, ghn)
    for a, rr in zip(fast, ref):
        np.testing.assert_allclose(np.asarray(a), rr, atol=_tol(dtype))


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_parity(dtype):
    rng = np.random.default_rng(0)
    size = 257
    p1 = rng.standard_normal(size).astype(dtype)
    p2 = p1.copy()
    m1, v1 = np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype)
    m2, v2 = m1.copy(), v1.copy()
    for t in range(1, 6):
        g = rng.standard_normal(size).astype(dtype)
        _fast.adam_update(p1, g, m1, v1, t, 1e-2, 0.9, 0.999, 1e-8)
        _ref.adam_update(p2, g, m2, v2, t, 1e-2, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p1, p2, atol=_tol(dtype))
    np.testing.assert_allclose(m1, m2, atol=_tol(dtype))
    np.testing.assert_allclose(v1, v2, atol=_tol(dtype))


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_huber_parity(dtype):
    rng = np.random.default_rng(0)
    x = (rng.standard_normal(301) * 3).astype(dtype)
    for delta in (0.5, 1.0, 2.5):
        np.testing.assert_allclose(np.asarray(_fast.huber_forward(x, delta)),
                                   _ref.huber_forward(x, delta), atol=_tol(dtype))
        np.testing.assert_allclose(np.asarray(_fast.huber_backward(x, delta)),
                                   _ref.huber_backward(x, delta), atol=_tol(dtype))


def test_dispatch_has_backend_name():
    assert _kernels.BACKEND in ("cython", "numpy")


def test_wrappers_handle_noncontiguous():
    rng = np.random.default_rng(1)
    big = rng.standard_normal((8, 12)).astype(np.float64)
    view = big[:, ::2]  # non-contiguous
    out = _kernels.huber_forward(view, 1.0)
    np.testing.assert_allclose(out, _ref.huber_forward(np.ascontiguousarray(view), 1.0))
