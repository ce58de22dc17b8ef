# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the per-step hot paths.

Same contracts as _ref.py; the gate math and optimizer update are fused
into single passes to avoid numpy temporaries inside sequential loops.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport fabs, sqrt, tanh, tanhf

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


cdef inline real _tanh(real x) noexcept nogil:
    if real is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef inline real _sig(real x) noexcept nogil:
    # branchless stable sigmoid keeps the gate loop vectorizable
    return <real>(0.5 + 0.5 * _tanh(<real>0.5 * x))


def gru_gates_forward(real[:, ::1] gx, real[:, ::1] gh, real[:, ::1] h_prev):
    cdef Py_ssize_t b = h_prev.shape[0], h = h_prev.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_h = np.empty((b, h), dtype=dtype)
    out_r = np.empty((b, h), dtype=dtype)
    out_z = np.empty((b, h), dtype=dtype)
    out_n = np.empty((b, h), dtype=dtype)
    cdef real[:, ::1] hn = out_h, r = out_r, z = out_z, n = out_n
    cdef Py_ssize_t i, j
    cdef real zv
    # separate flat passes so the compiler can vectorize the tanh calls
    with nogil:
        for i in range(b):
            for j in range(h):
                r[i, j] = _sig(gx[i, j] + gh[i, j])
            for j in range(h):
                z[i, j] = _sig(gx[i, h + j] + gh[i, h + j])
            for j in range(h):
                n[i, j] = _tanh(gx[i, 2 * h + j] + r[i, j] * gh[i, 2 * h + j])
            for j in range(h):
                zv = z[i, j]
                hn[i, j] = (1.0 - zv) * n[i, j] + zv * h_prev[i, j]
    return out_h, out_r, out_z, out_n


def gru_gates_backward(real[:, ::1] grad, real[:, ::1] h_prev, real[:, ::1] r,
                       real[:, ::1] z, real[:, ::1] n, real[:, ::1] gh_n):
    cdef Py_ssize_t b = h_prev.shape[0], h = h_prev.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_gx = np.empty((b, 3 * h), dtype=dtype)
    out_gh = np.empty((b, 3 * h), dtype=dtype)
    out_dh = np.empty((b, h), dtype=dtype)
    cdef real[:, ::1] d_gx = out_gx, d_gh = out_gh, d_hprev = out_dh
    cdef Py_ssize_t i, j
    cdef real g, dz, dn, da_n, dr, da_r, da_z
    with nogil:
        for i in range(b):
            for j in range(h):
                g = grad[i, j]
                dz = g * (h_prev[i, j] - n[i, j])
                dn = g * (1.0 - z[i, j])
                da_n = dn * (1.0 - n[i, j] * n[i, j])
                dr = da_n * gh_n[i, j]
                da_r = dr * r[i, j] * (1.0 - r[i, j])
                da_z = dz * z[i, j] * (1.0 - z[i, j])
                d_gx[i, j] = da_r
                d_gx[i, h + j] = da_z
                d_gx[i, 2 * h + j] = da_n
                d_gh[i, j] = da_r
                d_gh[i, h + j] = da_z
                d_gh[i, 2 * h + j] = da_n * r[i, j]
                d_hprev[i, j] = g * z[i, j]
    return out_gx, out_gh, out_dh


def adam_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, size = param.shape[0]
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double mi, vi
    with nogil:
        for i in range(size):
            mi = beta1 * m[i] + (1.0 - beta1) * grad[i]
            vi = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
            m[i] = <real>mi
            v[i] = <real>vi
            param[i] -= <real>(lr * (mi / c1) / (sqrt(vi / c2) + eps))


def huber_forward(real[::1] diff, double delta):
    cdef Py_ssize_t i, size = diff.shape[0]
    out = np.empty(size, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    cdef real a
    with nogil:
        for i in range(size):
            a = fabs(diff[i])
            if a <= delta:
                o[i] = <real>(0.5 * diff[i] * diff[i])
            else:
                o[i] = <real>(delta * (a - 0.5 * delta))
    return out


def huber_backward(real[::1] diff, double delta):
    cdef Py_ssize_t i, size = diff.shape[0]
    out = np.empty(size, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    with nogil:
        for i in range(size):
            if diff[i] > delta:
                o[i] = <real>delta
            elif diff[i] < -delta:
                o[i] = <real>(-delta)
            else:
                o[i] = diff[i]
    return out
