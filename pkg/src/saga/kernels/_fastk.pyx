# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Mirrors saga.kernels.reference function-for-function. All reductions
run left-to-right within a row, single pass where possible, no
intermediate temporaries. Inputs are 2-D C-contiguous float64.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    out_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s, v
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                v = exp(x[i, j] - m)
                out[i, j] = v
                s += v
            for j in range(d):
                out[i, j] /= s
    return out_arr


def softmax_bwd(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], d = y.shape[1]
    gx_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    cdef double inner
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(d):
                inner += y[i, j] * gy[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (gy[i, j] - inner)
    return gx_arr


def logsumexp_fwd(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    out_arr = np.empty(rows, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                s += exp(x[i, j] - m)
            out[i] = m + log(s)
    return out_arr


def logsumexp_bwd(double[:, ::1] x, double[::1] lse, double[::1] gy):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    gx_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(rows):
            for j in range(d):
                gx[i, j] = exp(x[i, j] - lse[i]) * gy[i]
    return gx_arr


def layernorm_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    y_arr = np.empty((rows, d), dtype=np.float64)
    mean_arr = np.empty(rows, dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr, rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, diff, r
    with nogil:
        for i in range(rows):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mu
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(double[:, ::1] x, double[::1] gamma, double[::1] mean,
                  double[::1] rstd, double[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    gx_arr = np.empty((rows, d), dtype=np.float64)
    gg_arr = np.zeros(d, dtype=np.float64)
    gb_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr, gb = gb_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, gxhat
    with nogil:
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                gxhat = gy[i, j] * gamma[j]
                m1 += gxhat
                m2 += gxhat * xhat
                gg[j] += gy[i, j] * xhat
                gb[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                gxhat = gy[i, j] * gamma[j]
                gx[i, j] = (gxhat - m1 - xhat * m2) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def l2norm_fwd(double[:, ::1] x, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    y_arr = np.empty((rows, d), dtype=np.float64)
    n_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] norms = n_arr
    cdef Py_ssize_t i, j
    cdef double s
    cdef bint bad = False
    with nogil:
        for i in range(rows):
            s = 0.0
            for j in range(d):
                s += x[i, j] * x[i, j]
            s = sqrt(s)
            norms[i] = s
            if s <= eps:
                bad = True
                break
            for j in range(d):
                y[i, j] = x[i, j] / s
    if bad:
        raise FloatingPointError("zero-norm row in l2 normalization")
    return y_arr, n_arr


def l2norm_bwd(double[:, ::1] y, double[::1] norms, double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], d = y.shape[1]
    gx_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    cdef double inner
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(d):
                inner += y[i, j] * gy[i, j]
            for j in range(d):
                gx[i, j] = (gy[i, j] - y[i, j] * inner) / norms[i]
    return gx_arr


def max_lastaxis(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    v_arr = np.empty(rows, dtype=np.float64)
    i_arr = np.empty(rows, dtype=np.int64)
    cdef double[::1] vals = v_arr
    cdef long long[::1] idx = i_arr
    cdef Py_ssize_t i, j, best
    cdef double m
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            best = 0
            for j in range(1, d):
                if x[i, j] > m:  # strict: ties keep the lowest index
                    m = x[i, j]
                    best = j
            vals[i] = m
            idx[i] = best
    return v_arr, i_arr


def quickgelu_fwd(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    y_arr = np.empty((rows, d), dtype=np.float64)
    s_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] y = y_arr, s = s_arr
    cdef Py_ssize_t i, j
    cdef double sig
    with nogil:
        for i in range(rows):
            for j in range(d):
                sig = 1.0 / (1.0 + exp(-1.702 * x[i, j]))
                s[i, j] = sig
                y[i, j] = x[i, j] * sig
    return y_arr, s_arr


def quickgelu_bwd(double[:, ::1] x, double[:, ::1] s, double[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    gx_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(rows):
            for j in range(d):
                gx[i, j] = gy[i, j] * (s[i, j] + 1.702 * x[i, j] * s[i, j] * (1.0 - s[i, j]))
    return gx_arr
