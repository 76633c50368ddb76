# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for rates and the primal Lagrangian ascent.

Same contract as ``_fallback``: powers in [0, 1], gains scaled by
p_max / noise_power, ``g[j, i]`` from transmitter j to receiver i.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, isfinite

cnp.import_array()

cdef double INV_LN2 = 1.0 / log(2.0)


cdef void _interf(const double[::1] u, const double[:, ::1] g, double* interf) noexcept nogil:
    # 1 + sum_{j != i} u_j g_ji, summed directly to avoid cancellation
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t i, j
    for i in range(n):
        interf[i] = 1.0
    for j in range(n):
        if u[j] != 0.0:
            for i in range(n):
                if i != j:
                    interf[i] += u[j] * g[j, i]


def rates(u, g):
    cdef double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = uu.shape[0]
    cdef Py_ssize_t i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] r = out
    cdef double[::1] interf = np.empty(n, dtype=np.float64)
    with nogil:
        _interf(uu, gg, &interf[0])
        for i in range(n):
            r[i] = log1p(uu[i] * gg[i, i] / interf[i]) * INV_LN2
    return out


cdef double _weighted(const double[::1] u, const double[:, ::1] g, const double[::1] w,
                      double* interf) noexcept nogil:
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t i
    cdef double acc = 0.0
    _interf(u, g, interf)
    for i in range(n):
        acc += w[i] * log1p(u[i] * g[i, i] / interf[i])
    return acc * INV_LN2


def weighted_rate_sum(u, g, w):
    cdef double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] ww = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] interf = np.empty(uu.shape[0], dtype=np.float64)
    return _weighted(uu, gg, ww, &interf[0])


def rate_grad(u, g, w):
    cdef double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] ww = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = uu.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] grad = out
    cdef double[::1] a = np.empty(n, dtype=np.float64)
    cdef double[::1] b = np.empty(n, dtype=np.float64)
    with nogil:
        _grad(uu, gg, ww, &a[0], &b[0], &grad[0])
    return out


cdef void _grad(const double[::1] u, const double[:, ::1] g, const double[::1] w,
                double* a, double* b, double* grad) noexcept nogil:
    # a_i = w_i / T_i and b_i = w_i S_i / (T_i I_i), with T = S + I
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t i, j
    cdef double acc, sig, tot
    _interf(u, g, b)
    for i in range(n):
        sig = u[i] * g[i, i]
        tot = sig + b[i]
        a[i] = w[i] / tot
        b[i] = a[i] * sig / b[i]
    for j in range(n):
        acc = 0.0
        for i in range(n):
            if i != j:
                acc += g[j, i] * b[i]
        grad[j] = (g[j, j] * a[j] - acc) * INV_LN2


def ascent(u0, g, w, double eta, int steps):
    cdef double[::1] u = np.clip(np.array(u0, dtype=np.float64), 0.0, 1.0)
    cdef double[:, ::1] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] ww = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = u.shape[0]
    cdef double[::1] a = np.empty(n, dtype=np.float64)
    cdef double[::1] b = np.empty(n, dtype=np.float64)
    cdef double[::1] grad = np.empty(n, dtype=np.float64)
    cdef int s
    cdef Py_ssize_t j
    cdef double v
    cdef bint bad = False
    with nogil:
        for s in range(steps):
            _grad(u, gg, ww, &a[0], &b[0], &grad[0])
            for j in range(n):
                if not isfinite(grad[j]):
                    bad = True
                v = u[j] + eta * grad[j]
                u[j] = 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)
            if bad:
                break
        v = _weighted(u, gg, ww, &a[0])
    if bad:
        raise FloatingPointError("non-finite Lagrangian gradient")
    return np.asarray(u), v
