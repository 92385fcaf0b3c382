# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled single-pass versions of the hot training kernels.

Semantics match `sgvlp.kernels._pure`; within-row summation is sequential,
so float results agree with numpy up to summation-order rounding.
"""

import numpy as np

cimport cython
from libc.math cimport sqrt, tanh, pow

ctypedef fused floating:
    float
    double

cdef double _SQRT_2_OVER_PI = 0.7978845608028654
cdef double _GELU_C = 0.044715


def gelu_fwd(floating[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef double v, inner
    for i in range(n):
        v = x[i]
        inner = _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
        out[i] = <floating>(0.5 * v * (1.0 + tanh(inner)))
    return out_arr


def gelu_bwd(floating[::1] x, floating[::1] grad_out):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef double v, inner, t, d_inner
    for i in range(n):
        v = x[i]
        inner = _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
        t = tanh(inner)
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
        out[i] = <floating>(grad_out[i]
                            * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner))
    return out_arr


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                   double eps):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    dtype = np.asarray(x).dtype
    y_arr = np.empty((rows, cols), dtype=dtype)
    mean_arr = np.empty(rows, dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr, rstd = rstd_arr
    cdef double acc, mu, var, rs, d
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc += x[r, c]
        mu = acc / cols
        acc = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            acc += d * d
        var = acc / cols
        rs = 1.0 / sqrt(var + eps)
        mean[r] = <floating>mu
        rstd[r] = <floating>rs
        for c in range(cols):
            y[r, c] = <floating>((x[r, c] - mu) * rs * gain[c] + bias[c])
    return y_arr, mean_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] x, floating[::1] gain,
                   floating[::1] mean, floating[::1] rstd,
                   floating[:, ::1] grad_out):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    dtype = np.asarray(x).dtype
    gx_arr = np.empty((rows, cols), dtype=dtype)
    ggain_arr = np.zeros(cols, dtype=dtype)
    gbias_arr = np.zeros(cols, dtype=dtype)
    cdef floating[:, ::1] gx = gx_arr
    cdef floating[::1] ggain = ggain_arr, gbias = gbias_arr
    cdef double mu, rs, xhat, g, mean_g, mean_gx, acc_g, acc_gx
    for r in range(rows):
        mu = mean[r]
        rs = rstd[r]
        acc_g = 0.0
        acc_gx = 0.0
        for c in range(cols):
            xhat = (x[r, c] - mu) * rs
            g = grad_out[r, c] * gain[c]
            acc_g += g
            acc_gx += g * xhat
            ggain[c] += <floating>(grad_out[r, c] * xhat)
            gbias[c] += grad_out[r, c]
        mean_g = acc_g / cols
        mean_gx = acc_gx / cols
        for c in range(cols):
            xhat = (x[r, c] - mu) * rs
            g = grad_out[r, c] * gain[c]
            gx[r, c] = <floating>(rs * (g - mean_g - xhat * mean_gx))
    return gx_arr, ggain_arr, gbias_arr


def adam_update(floating[::1] param, floating[::1] grad,
                floating[::1] m, floating[::1] v,
                long step, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, <double>step)
    cdef double bc2 = 1.0 - pow(beta2, <double>step)
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * grad[i]
        vi = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        m[i] = <floating>mi
        v[i] = <floating>vi
        param[i] -= <floating>(lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
