# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row-parallel kernels. Row reductions run sequentially within a
row so results are independent of thread count and scheduling."""

import numpy as np

cimport cython
from cython.parallel cimport prange
from libc.math cimport exp, expf, sqrt, sqrtf, tanh, tanhf

ctypedef fused floating:
    float
    double

cdef double _GELU_C = 0.7978845608028654
cdef double _GELU_A = 0.044715


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _tanh(floating x) noexcept nogil:
    if floating is float:
        return tanhf(x)
    else:
        return tanh(x)


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef floating m, z, inv
    for r in prange(rows, nogil=True):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        z = 0
        for c in range(cols):
            out[r, c] = _exp(x[r, c] - m)
            z = z + out[r, c]
        inv = 1 / z
        for c in range(cols):
            out[r, c] = out[r, c] * inv
    return out_arr


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef floating dot
    for r in prange(rows, nogil=True):
        dot = 0
        for c in range(cols):
            dot = dot + g[r, c] * y[r, c]
        for c in range(cols):
            out[r, c] = y[r, c] * (g[r, c] - dot)
    return out_arr


def gelu_fwd(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.asarray(x).dtype
    y_arr = np.empty(n, dtype=dtype)
    u_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_arr
    cdef floating[::1] u = u_arr
    cdef Py_ssize_t i
    cdef floating xi, ui
    for i in prange(n, nogil=True):
        xi = x[i]
        ui = _tanh(<floating>_GELU_C * (xi + <floating>_GELU_A * xi * xi * xi))
        u[i] = ui
        y[i] = <floating>0.5 * xi * (1 + ui)
    return y_arr, u_arr


def gelu_bwd(floating[::1] x, floating[::1] u, floating[::1] g):
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t i
    cdef floating xi, ui, local
    for i in prange(n, nogil=True):
        xi = x[i]
        ui = u[i]
        local = <floating>0.5 * (1 + ui) \
            + <floating>0.5 * xi * (1 - ui * ui) \
            * <floating>_GELU_C * (1 + 3 * <floating>_GELU_A * xi * xi)
        out[i] = g[i] * local
    return out_arr


def layernorm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta,
                  double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    dtype = np.asarray(x).dtype
    y_arr = np.empty((rows, cols), dtype=dtype)
    xhat_arr = np.empty((rows, cols), dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef Py_ssize_t r, c
    cdef floating mu, var, rs, d
    for r in prange(rows, nogil=True):
        mu = 0
        for c in range(cols):
            mu = mu + x[r, c]
        mu = mu / cols
        var = 0
        for c in range(cols):
            d = x[r, c] - mu
            var = var + d * d
        var = var / cols
        rs = 1 / _sqrt(var + <floating>eps)
        rstd[r] = rs
        for c in range(cols):
            xhat[r, c] = (x[r, c] - mu) * rs
            y[r, c] = xhat[r, c] * gamma[c] + beta[c]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd(floating[:, ::1] xhat, floating[::1] rstd,
                  floating[::1] gamma, floating[:, ::1] g):
    cdef Py_ssize_t rows = xhat.shape[0], cols = xhat.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(xhat).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef floating s1, s2, gxg
    for r in prange(rows, nogil=True):
        s1 = 0
        s2 = 0
        for c in range(cols):
            gxg = g[r, c] * gamma[c]
            s1 = s1 + gxg
            s2 = s2 + gxg * xhat[r, c]
        s1 = s1 / cols
        s2 = s2 / cols
        for c in range(cols):
            out[r, c] = rstd[r] * (g[r, c] * gamma[c] - s1 - xhat[r, c] * s2)
    return out_arr


def sigmoid_fwd(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t i
    cdef floating e
    for i in prange(n, nogil=True):
        if x[i] >= 0:
            e = _exp(-x[i])
            out[i] = 1 / (1 + e)
        else:
            e = _exp(x[i])
            out[i] = e / (1 + e)
    return out_arr


def adamw_update(floating[::1] p, floating[::1] g, floating[::1] m,
                 floating[::1] v, double lr, double beta1, double beta2,
                 double eps, double bc1, double bc2, double wd_mult):
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef floating b1 = <floating>beta1, b2 = <floating>beta2
    cdef floating lrf = <floating>lr, epsf = <floating>eps
    cdef floating c1 = <floating>bc1, c2 = <floating>bc2
    cdef floating wdm = <floating>wd_mult
    cdef floating mh, vh
    for i in prange(n, nogil=True):
        m[i] = b1 * m[i] + (1 - b1) * g[i]
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
        mh = m[i] / c1
        vh = v[i] / c2
        p[i] = p[i] - lrf * (mh / (_sqrt(vh) + epsf))
        p[i] = p[i] * wdm
