"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and semantics are identical; only rounding may differ.
"""

import numpy as np

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def masked_softmax_forward(x, mask):
    # x: (G, R, C); mask: (G, C) uint8
    valid = mask.astype(bool)[:, None, :]
    shifted = np.where(valid, x, -np.inf)
    m = shifted.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.where(valid, np.exp(np.where(valid, x - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    s = np.where(s == 0.0, 1.0, s)
    return (e / s).astype(x.dtype, copy=False)


def softmax_backward(y, gy):
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), rstd[:, 0].astype(x.dtype, copy=False)


def layer_norm_backward(gy, xhat, rstd, gamma):
    gxh = gy * gamma
    a = gxh.mean(axis=-1, keepdims=True)
    b = (gxh * xhat).mean(axis=-1, keepdims=True)
    gx = rstd[:, None] * (gxh - a - xhat * b)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_backward(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
