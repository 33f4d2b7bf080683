# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, r, v
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            v = x[i, j] - mu
            var += v * v
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            v = (x[i, j] - mu) * r
            xhat[i, j] = v
            y[i, j] = v * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] dy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    cdef double m1, m2, g
    dx_arr = np.empty((n, d))
    dgamma_arr = np.zeros(d)
    dbeta_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return dx_arr, dgamma_arr, dbeta_arr


def masked_softmax_forward(const double[:, :, :, ::1] scores, lengths):
    cdef Py_ssize_t b = scores.shape[0], h = scores.shape[1], t = scores.shape[2]
    cdef Py_ssize_t i, k, q, j, n
    cdef double m, s, e
    cdef cnp.int64_t[::1] lens = np.ascontiguousarray(lengths, dtype=np.int64)
    out_arr = np.zeros((b, h, t, scores.shape[3]))
    cdef double[:, :, :, ::1] out = out_arr
    for i in range(b):
        n = lens[i]
        for k in range(h):
            for q in range(t):
                m = -INFINITY
                for j in range(n):
                    if scores[i, k, q, j] > m:
                        m = scores[i, k, q, j]
                s = 0.0
                for j in range(n):
                    e = exp(scores[i, k, q, j] - m)
                    out[i, k, q, j] = e
                    s += e
                for j in range(n):
                    out[i, k, q, j] /= s
    return out_arr


def softmax_backward(const double[:, :, :, ::1] dprobs, const double[:, :, :, ::1] probs):
    cdef Py_ssize_t b = probs.shape[0], h = probs.shape[1], t = probs.shape[2]
    cdef Py_ssize_t tk = probs.shape[3], i, k, q, j
    cdef double dot
    out_arr = np.empty((b, h, t, tk))
    cdef double[:, :, :, ::1] out = out_arr
    for i in range(b):
        for k in range(h):
            for q in range(t):
                dot = 0.0
                for j in range(tk):
                    dot += dprobs[i, k, q, j] * probs[i, k, q, j]
                for j in range(tk):
                    out[i, k, q, j] = probs[i, k, q, j] * (dprobs[i, k, q, j] - dot)
    return out_arr


def gelu_forward(x):
    cdef double[::1] xf = np.ascontiguousarray(x).reshape(-1)
    out_arr = np.empty(xf.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v
    for i in range(xf.shape[0]):
        v = xf[i]
        out[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v)))
    return out_arr.reshape(np.shape(x))


def gelu_backward(dy, x):
    cdef double[::1] xf = np.ascontiguousarray(x).reshape(-1)
    cdef double[::1] df = np.ascontiguousarray(dy).reshape(-1)
    out_arr = np.empty(xf.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v, th
    for i in range(xf.shape[0]):
        v = xf[i]
        th = tanh(GELU_C * (v + 0.044715 * v * v * v))
        out[i] = df[i] * (0.5 * (1.0 + th)
                          + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * v * v))
    return out_arr.reshape(np.shape(x))


def segment_mean_forward(const double[:, :, ::1] features, spans):
    cdef Py_ssize_t b = features.shape[0], d = features.shape[2], i, s, r, j
    cdef cnp.int64_t[:, :, ::1] sp = np.ascontiguousarray(spans, dtype=np.int64)
    cdef cnp.int64_t lo, hi
    out_arr = np.zeros((b, 3, d))
    cdef double[:, :, ::1] out = out_arr
    for i in range(b):
        for s in range(3):
            lo = sp[i, s, 0]
            hi = sp[i, s, 1]
            if hi <= lo:
                continue
            for r in range(lo, hi):
                for j in range(d):
                    out[i, s, j] += features[i, r, j]
            for j in range(d):
                out[i, s, j] /= (hi - lo)
    return out_arr


def segment_mean_backward(const double[:, :, ::1] dpooled, spans, Py_ssize_t n_tokens):
    cdef Py_ssize_t b = dpooled.shape[0], d = dpooled.shape[2], i, s, r, j
    cdef cnp.int64_t[:, :, ::1] sp = np.ascontiguousarray(spans, dtype=np.int64)
    cdef cnp.int64_t lo, hi
    cdef double w
    out_arr = np.zeros((b, n_tokens, d))
    cdef double[:, :, ::1] out = out_arr
    for i in range(b):
        for s in range(3):
            lo = sp[i, s, 0]
            hi = sp[i, s, 1]
            if hi <= lo:
                continue
            w = 1.0 / (hi - lo)
            for r in range(lo, hi):
                for j in range(d):
                    out[i, r, j] += dpooled[i, s, j] * w
    return out_arr
