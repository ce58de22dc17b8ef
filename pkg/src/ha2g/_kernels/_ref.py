"""Pure-numpy reference implementations of the hot per-step kernels.

Used as the fallback backend when the compiled extension is unavailable
(or when HA2G_PURE_PYTHON=1), and as the correctness oracle in tests.
"""

import numpy as np

BACKEND = "numpy"


def gru_gates_forward(gx, gh, h_prev):
    """Fused GRU gate math given the pre-activations.

    gx = x @ Wx + bx, gh = h_prev @ Wh + bh, both (B, 3H) laid out [r|z|n].
    Returns (h_new, r, z, n); the candidate uses n = tanh(gx_n + r * gh_n).
    """
    h = h_prev.shape[-1]
    r = _sigmoid(gx[:, :h] + gh[:, :h])
    z = _sigmoid(gx[:, h:2 * h] + gh[:, h:2 * h])
    n = np.tanh(gx[:, 2 * h:] + r * gh[:, 2 * h:])
    h_new = (1.0 - z) * n + z * h_prev
    return h_new, r, z, n


def gru_gates_backward(grad, h_prev, r, z, n, gh_n):
    """Backward of gru_gates_forward w.r.t. the pre-activations.

    Returns (d_gx, d_gh, d_hprev); the matmul parts (weight/input grads)
    are left to the caller.
    """
    dz = grad * (h_prev - n)
    dn = grad * (1.0 - z)
    da_n = dn * (1.0 - n * n)
    dr = da_n * gh_n
    d_ghn = da_n * r
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    d_gx = np.concatenate([da_r, da_z, da_n], axis=1)
    d_gh = np.concatenate([da_r, da_z, d_ghn], axis=1)
    d_hprev = grad * z
    return d_gx, d_gh, d_hprev


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place on param/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def huber_forward(diff, delta):
    """Elementwise Huber value of a difference array."""
    a = np.abs(diff)
    quad = 0.5 * diff * diff
    lin = delta * (a - 0.5 * delta)
    return np.where(a <= delta, quad, lin)


def huber_backward(diff, delta):
    """Derivative of the elementwise Huber w.r.t. diff."""
    return np.clip(diff, -delta, delta)


def _sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
