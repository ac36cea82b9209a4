# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels; same contract as ``_kernels_py``."""

import numpy as np
from libc.math cimport exp, log, sqrt, INFINITY


def softmax_forward(const double[:, ::1] x, const unsigned char[:, ::1] mask=None):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double m, total, e
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef bint masked = mask is not None
    with nogil:
        for i in range(rows):
            m = -INFINITY
            for j in range(n):
                if (not masked or mask[i, j]) and x[i, j] > m:
                    m = x[i, j]
            total = 0.0
            for j in range(n):
                if masked and not mask[i, j]:
                    out[i, j] = 0.0
                else:
                    e = exp(x[i, j] - m)
                    out[i, j] = e
                    total += e
            if total > 0.0:
                for j in range(n):
                    out[i, j] = out[i, j] / total
    return out_arr


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    cdef double inner
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(n):
                inner += gy[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (gy[i, j] - inner)
    return out_arr


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mean, var, d, r
    y_arr = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean = mean / n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var = var / n
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                d = (x[i, j] - mean) * r
                xhat[i, j] = d
                y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t rows = gy.shape[0], n = gy.shape[1], i, j
    cdef double a, b, g
    gx_arr = np.empty((rows, n), dtype=np.float64)
    gg_arr = np.zeros(n, dtype=np.float64)
    gb_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for i in range(rows):
            a = 0.0
            b = 0.0
            for j in range(n):
                g = gy[i, j] * gamma[j]
                a += g
                b += g * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            a = a / n
            b = b / n
            for j in range(n):
                gx[i, j] = (gy[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def cross_entropy_forward(const double[:, ::1] logits, const long[::1] targets):
    cdef Py_ssize_t rows = logits.shape[0], n = logits.shape[1], i, j
    cdef double m, total, e
    losses_arr = np.empty(rows, dtype=np.float64)
    probs_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] probs = probs_arr
    with nogil:
        for i in range(rows):
            m = logits[i, 0]
            for j in range(1, n):
                if logits[i, j] > m:
                    m = logits[i, j]
            total = 0.0
            for j in range(n):
                e = exp(logits[i, j] - m)
                probs[i, j] = e
                total += e
            for j in range(n):
                probs[i, j] = probs[i, j] / total
            losses[i] = log(total) - (logits[i, targets[i]] - m)
    return losses_arr, probs_arr
