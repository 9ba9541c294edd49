# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Same contract as ``aesq._kernels_py``."""

import numpy as np

from libc.math cimport erf, exp, sqrt

cdef double SQRT1_2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, k):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(k):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(k):
            y[i, j] = y[i, j] / s
    return out


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * y[i, j]
        for j in range(k):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gain,
                   const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    out = np.empty((n, h), dtype=np.float64)
    xhat_arr = np.empty((n, h), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(h):
            mu += x[i, j]
        mu /= h
        var = 0.0
        for j in range(h):
            d = x[i, j] - mu
            var += d * d
        var /= h
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(h):
            xhat[i, j] = (x[i, j] - mu) * r
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return out, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], h = g.shape[1], i, j
    dx_arr = np.empty((n, h), dtype=np.float64)
    dgain_arr = np.zeros(h, dtype=np.float64)
    dbias_arr = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef double mean_d, mean_dx, dxh
    for i in range(n):
        mean_d = 0.0
        mean_dx = 0.0
        for j in range(h):
            dxh = g[i, j] * gain[j]
            mean_d += dxh
            mean_dx += dxh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        mean_d /= h
        mean_dx /= h
        for j in range(h):
            dx[i, j] = rstd[i] * (g[i, j] * gain[j] - mean_d - xhat[i, j] * mean_dx)
    return dx_arr, dgain_arr, dbias_arr


def gelu_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(n):
        for j in range(k):
            y[i, j] = x[i, j] * 0.5 * (1.0 + erf(x[i, j] * SQRT1_2))
    return out


def gelu_bwd(const double[:, ::1] x, const double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double v, cdf, pdf
    for i in range(n):
        for j in range(k):
            v = x[i, j]
            cdf = 0.5 * (1.0 + erf(v * SQRT1_2))
            pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
            dx[i, j] = g[i, j] * (cdf + v * pdf)
    return out


def emd_fwd(const double[:, ::1] target, const double[:, ::1] pred, double eps):
    cdef Py_ssize_t n = pred.shape[0], k = pred.shape[1], i, j
    loss_arr = np.empty(n, dtype=np.float64)
    diff_arr = np.empty((n, k), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] diff = diff_arr
    cdef double cp, ct, acc
    for i in range(n):
        cp = 0.0
        ct = 0.0
        acc = 0.0
        for j in range(k):
            cp += pred[i, j]
            ct += target[i, j]
            diff[i, j] = cp - ct
            acc += diff[i, j] * diff[i, j]
        loss[i] = sqrt(acc / k + eps)
    return loss_arr, diff_arr


def emd_bwd(const double[:, ::1] diff, const double[::1] loss, const double[::1] g):
    cdef Py_ssize_t n = diff.shape[0], k = diff.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] dp = out
    cdef double scale, acc
    for i in range(n):
        scale = g[i] / (k * loss[i])
        acc = 0.0
        for j in range(k - 1, -1, -1):
            acc += diff[i, j] * scale
            dp[i, j] = acc
    return out


def average_ranks(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i, j, t
    order_arr = np.argsort(x)  # tie blocks get one shared rank, so stability is irrelevant
    cdef Py_ssize_t[::1] order = order_arr.astype(np.intp)
    ranks_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] ranks = ranks_arr
    cdef double avg
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        # ranks are 1-based; a tie block i..j shares the mean rank
        avg = 0.5 * (i + j) + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks_arr
