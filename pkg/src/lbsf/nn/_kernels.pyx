# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels: masked softmax, layer norm and tanh-GELU.

Every routine is a single pass (or two) over contiguous rows and matches the
numpy fallback in :mod:`lbsf.nn._fallback` up to rounding.  Reductions run
left to right so results are deterministic.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654   # sqrt(2 / pi)
cdef double GELU_A = 0.044715


cdef inline double _exp(double v, bint single) nogil:
    # single precision exp is several times faster and exact enough for float32
    if single:
        return expf(<float>v)
    return exp(v)


cdef inline double _tanh(double z, bint single) nogil:
    if z > 20.0:
        return 1.0
    if z < -20.0:
        return -1.0
    return 1.0 - 2.0 / (_exp(2.0 * z, single) + 1.0)


def masked_softmax_forward(real[:, :, ::1] x, const unsigned char[:, ::1] mask):
    """Softmax over the last axis of ``x`` (groups, rows, cols).

    ``mask[g, c] == 0`` excludes column ``c`` for every row of group ``g``.
    A row with no admissible column is written as zeros.
    """
    cdef Py_ssize_t G = x.shape[0], R = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t g, r, c
    cdef double m, s, e
    cdef bint any_valid
    out_arr = np.zeros((G, R, C), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] out = out_arr
    for g in range(G):
        for r in range(R):
            any_valid = False
            m = 0.0
            for c in range(C):
                if mask[g, c]:
                    if not any_valid or x[g, r, c] > m:
                        m = x[g, r, c]
                    any_valid = True
            if not any_valid:
                continue
            s = 0.0
            for c in range(C):
                if mask[g, c]:
                    e = _exp(x[g, r, c] - m, real is float)
                    out[g, r, c] = <real>e
                    s += e
            s = 1.0 / s
            for c in range(C):
                if mask[g, c]:
                    out[g, r, c] = <real>(out[g, r, c] * s)
    return out_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] gy):
    """Row-wise ``y * (gy - sum(gy * y))``."""
    cdef Py_ssize_t N = y.shape[0], C = y.shape[1]
    cdef Py_ssize_t i, c
    cdef double dot
    out_arr = np.empty((N, C), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_arr
    for i in range(N):
        dot = 0.0
        for c in range(C):
            dot += gy[i, c] * y[i, c]
        for c in range(C):
            out[i, c] = <real>(y[i, c] * (gy[i, c] - dot))
    return out_arr


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    """Return ``(y, xhat, rstd)`` for row-wise layer normalisation."""
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean, var, d, r
    dt = np.float32 if real is float else np.float64
    y_arr = np.empty((N, D), dtype=dt)
    xhat_arr = np.empty((N, D), dtype=dt)
    rstd_arr = np.empty(N, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    for i in range(N):
        mean = 0.0
        for j in range(D):
            mean += x[i, j]
        mean /= D
        var = 0.0
        for j in range(D):
            d = x[i, j] - mean
            var += d * d
        var /= D
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <real>r
        for j in range(D):
            d = (x[i, j] - mean) * r
            xhat[i, j] = <real>d
            y[i, j] = <real>(d * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] gy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    """Return ``(gx, ggamma, gbeta)``."""
    cdef Py_ssize_t N = gy.shape[0], D = gy.shape[1]
    cdef Py_ssize_t i, j
    cdef double a, b, gxh
    dt = np.float32 if real is float else np.float64
    gx_arr = np.empty((N, D), dtype=dt)
    acc_g = np.zeros(D, dtype=np.float64)
    acc_b = np.zeros(D, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gg = acc_g
    cdef double[::1] gb = acc_b
    for i in range(N):
        a = 0.0
        b = 0.0
        for j in range(D):
            gxh = gy[i, j] * gamma[j]
            a += gxh
            b += gxh * xhat[i, j]
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
        a /= D
        b /= D
        for j in range(D):
            gxh = gy[i, j] * gamma[j]
            gx[i, j] = <real>(rstd[i] * (gxh - a - xhat[i, j] * b))
    return gx_arr, acc_g.astype(dt), acc_b.astype(dt)


def gelu_forward(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    out_arr = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_arr
    for i in range(n):
        v = x[i]
        out[i] = <real>(0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v), real is float)))
    return out_arr


def gelu_backward(real[::1] x, real[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t, dinner
    out_arr = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_arr
    for i in range(n):
        v = x[i]
        t = _tanh(GELU_C * (v + GELU_A * v * v * v), real is float)
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = <real>(gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))
    return out_arr
