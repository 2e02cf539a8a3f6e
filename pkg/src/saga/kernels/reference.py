"""Numpy reference implementations of the row-wise hot kernels.

Every function operates on 2-D C-contiguous float64 arrays of shape
(rows, d) and reduces/normalizes along the last axis. The compiled
backend in ``_fastk.pyx`` mirrors these signatures exactly; callers go
through ``saga.kernels`` which picks one backend at import time.
"""

import numpy as np


def softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    y = np.exp(x - m)
    y /= np.sum(y, axis=-1, keepdims=True)
    return y


def softmax_bwd(y, gy):
    inner = np.sum(y * gy, axis=-1, keepdims=True)
    return y * (gy - inner)


def logsumexp_fwd(x):
    m = np.max(x, axis=-1)
    return m + np.log(np.sum(np.exp(x - m[:, None]), axis=-1))


def logsumexp_bwd(x, lse, gy):
    # d lse / dx = softmax(x); gy has shape (rows,)
    return np.exp(x - lse[:, None]) * gy[:, None]


def layernorm_fwd(x, gamma, beta, eps):
    mean = np.mean(x, axis=-1)
    var = np.mean((x - mean[:, None]) ** 2, axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layernorm_bwd(x, gamma, mean, rstd, gy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxhat = gy * gamma
    m1 = np.mean(gxhat, axis=-1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    ggamma = np.sum(gy * xhat, axis=0)
    gbeta = np.sum(gy, axis=0)
    return gx, ggamma, gbeta


def l2norm_fwd(x, eps):
    norms = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(norms <= eps):
        raise FloatingPointError("zero-norm row in l2 normalization")
    return x / norms[:, None], norms


def l2norm_bwd(y, norms, gy):
    inner = np.sum(y * gy, axis=-1, keepdims=True)
    return (gy - y * inner) / norms[:, None]


def max_lastaxis(x):
    idx = np.argmax(x, axis=-1)  # first occurrence on ties: lowest index
    vals = np.take_along_axis(x, idx[:, None], axis=-1)[:, 0]
    return vals, idx.astype(np.int64)


def quickgelu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-1.702 * x))
    return x * s, s


def quickgelu_bwd(x, s, gy):
    return gy * (s + 1.702 * x * s * (1.0 - s))
