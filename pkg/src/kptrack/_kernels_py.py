"""Numpy reference versions of the row kernels in ``_kernels.pyx``.

Signatures match the compiled module one for one. Inputs are 2-D
``(rows, dim)`` arrays for the row kernels and flat arrays for the
element-wise ones; reductions accumulate in float64.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, dtype=np.float64, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, dtype=np.float64, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (centered * rstd).astype(x.dtype)
    y = xhat * gain + bias
    return y.astype(x.dtype, copy=False), xhat, rstd[:, 0].astype(x.dtype)


def layer_norm_backward(dy, xhat, rstd, gain):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, dtype=np.float64, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, dtype=np.float64, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    dgain = np.sum(dy * xhat, axis=0, dtype=np.float64)
    dbias = np.sum(dy, axis=0, dtype=np.float64)
    dt = dy.dtype
    return dx.astype(dt, copy=False), dgain.astype(dt), dbias.astype(dt)


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, dtype=np.float64, keepdims=True)
    return (e / total).astype(x.dtype, copy=False)


def softmax_backward(dy, y):
    inner = np.sum(dy * y, axis=1, dtype=np.float64, keepdims=True)
    return (y * (dy - inner)).astype(dy.dtype, copy=False)


def gelu_forward(x):
    return (0.5 * x * (1.0 + erf(x * _SQRT_HALF))).astype(x.dtype, copy=False)


def gelu_backward(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (dy * (cdf + x * pdf)).astype(dy.dtype, copy=False)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam step on flat arrays; ``step`` counts from 1."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    param -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
