# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for the autodiff engine.

Each function mirrors the one of the same name in ``_kernels_py``. Row
reductions accumulate in double regardless of the storage type.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, sqrt, erf, erff

cnp.import_array()

cdef double SQRT_HALF = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def layer_norm_forward(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mean, var, diff, r, h
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mean
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <floating>r
            for j in range(d):
                h = (x[i, j] - mean) * r
                xhat[i, j] = <floating>h
                y[i, j] = <floating>(h * gain[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(floating[:, ::1] dy, floating[:, ::1] xhat, floating[::1] rstd,
                        floating[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dgain = np.zeros(d, dtype=np.float64)
    cdef double[::1] dbias = np.zeros(d, dtype=np.float64)
    cdef double m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gain[j]
                m1 += g
                m2 += g * xhat[i, j]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                g = dy[i, j] * gain[j]
                dx[i, j] = <floating>((g - m1 - xhat[i, j] * m2) * rstd[i])
    return dx_arr, np.asarray(dgain).astype(dtype), np.asarray(dbias).astype(dtype)


def softmax_forward(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef double mx, total, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            total = 0.0
            for j in range(d):
                if floating is float:
                    e = expf(<float>(x[i, j] - mx))
                else:
                    e = exp(x[i, j] - mx)
                y[i, j] = <floating>e
                total += e
            for j in range(d):
                y[i, j] = <floating>(y[i, j] / total)
    return y_arr


def softmax_backward(floating[:, ::1] dy, floating[:, ::1] y):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef double inner
    with nogil:
        for i in range(n):
            inner = 0.0
            for j in range(d):
                inner += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = <floating>(y[i, j] * (dy[i, j] - inner))
    return dx_arr


def gelu_forward(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            if floating is float:
                y[i] = <floating>(0.5 * v * (1.0 + erff(<float>(v * SQRT_HALF))))
            else:
                y[i] = <floating>(0.5 * v * (1.0 + erf(v * SQRT_HALF)))
    return y_arr


def gelu_backward(floating[::1] dy, floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = dx_arr
    cdef double v, cdf, pdf
    with nogil:
        for i in range(n):
            v = x[i]
            if floating is float:
                cdf = 0.5 * (1.0 + erff(<float>(v * SQRT_HALF)))
                pdf = INV_SQRT_2PI * expf(<float>(-0.5 * v * v))
            else:
                cdf = 0.5 * (1.0 + erf(v * SQRT_HALF))
                pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
            dx[i] = <floating>(dy[i] * (cdf + v * pdf))
    return dx_arr


def adam_update(floating[::1] param, floating[::1] grad, floating[::1] m, floating[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    """In-place Adam step on flat arrays; ``step`` counts from 1."""
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double step_size = lr / bc1
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m[i] = <floating>mi
            v[i] = <floating>vi
            param[i] = <floating>(param[i] - step_size * mi / (sqrt(vi / bc2) + eps))
