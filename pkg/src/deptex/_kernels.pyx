# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_kernels_py`` signature for signature."""
import numpy as np

from libc.math cimport exp, log, fabs, INFINITY

NAME = "cython"


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    out = np.empty((nb * ho * wo, nc * kh * kw))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, i, j, c, p, q, row, col, y0, x0
    with nogil:
        for b in range(nb):
            for i in range(ho):
                y0 = i * stride
                for j in range(wo):
                    x0 = j * stride
                    row = (b * ho + i) * wo + j
                    col = 0
                    for c in range(nc):
                        for p in range(kh):
                            for q in range(kw):
                                o[row, col] = xp[b, c, y0 + p, x0 + q]
                                col += 1
    return out


def col2im(const double[:, ::1] cols, int nb, int nc, int hp, int wp,
           int kh, int kw, int stride, int ho, int wo):
    out = np.zeros((nb, nc, hp, wp))
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, i, j, c, p, q, row, col, y0, x0
    with nogil:
        for b in range(nb):
            for i in range(ho):
                y0 = i * stride
                for j in range(wo):
                    x0 = j * stride
                    row = (b * ho + i) * wo + j
                    col = 0
                    for c in range(nc):
                        for p in range(kh):
                            for q in range(kw):
                                o[b, c, y0 + p, x0 + q] += cols[row, col]
                                col += 1
    return out


cdef double _row_entropy(const double[::1] d, double beta, double[::1] w) noexcept nogil:
    cdef Py_ssize_t j, m = d.shape[0]
    cdef double z = 0.0, s = 0.0
    for j in range(m):
        w[j] = exp(-beta * d[j])
        z += w[j]
        s += w[j] * d[j]
    for j in range(m):
        w[j] /= z
    return log(z) + beta * s / z


def perplexity_search(const double[:, ::1] d2, double perplexity, double tol, int max_iter):
    cdef Py_ssize_t n = d2.shape[0], i, j, k, it
    P_arr = np.zeros((n, n))
    betas_arr = np.empty(n)
    cdef double[:, ::1] P = P_arr
    cdef double[::1] betas = betas_arr
    cdef double[::1] d = np.empty(n - 1)
    cdef double[::1] w = np.empty(n - 1)
    cdef double target = log(perplexity), dmin, mean, t, lo, hi, h
    with nogil:
        for i in range(n):
            k = 0
            for j in range(n):
                if j != i:
                    d[k] = d2[i, j]
                    k += 1
            dmin = d[0]
            for k in range(n - 1):
                if d[k] < dmin:
                    dmin = d[k]
            mean = 0.0
            for k in range(n - 1):
                d[k] -= dmin
                mean += d[k]
            mean /= (n - 1)
            t = -log(mean) if mean > 0 else 0.0
            lo = -INFINITY
            hi = INFINITY
            h = _row_entropy(d, exp(t), w)
            for it in range(max_iter):
                if fabs(exp(h) - perplexity) <= tol * perplexity:
                    break
                if h > target:
                    lo = t
                    t = t + 2.0 if hi == INFINITY else 0.5 * (lo + hi)
                else:
                    hi = t
                    t = t - 2.0 if lo == -INFINITY else 0.5 * (lo + hi)
                h = _row_entropy(d, exp(t), w)
            k = 0
            for j in range(n):
                if j != i:
                    P[i, j] = w[k]
                    k += 1
            betas[i] = exp(t)
    return P_arr, betas_arr


def tsne_grad(const double[:, ::1] P, const double[:, ::1] Y):
    cdef Py_ssize_t n = Y.shape[0], dim = Y.shape[1], i, j, k
    num_arr = np.zeros((n, n))
    grad_arr = np.zeros((n, dim))
    cdef double[:, ::1] num = num_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double z = 0.0, d, diff, kl = 0.0, q, coef
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                d = 0.0
                for k in range(dim):
                    diff = Y[i, k] - Y[j, k]
                    d += diff * diff
                num[i, j] = 1.0 / (1.0 + d)
                num[j, i] = num[i, j]
                z += 2.0 * num[i, j]
        for i in range(n):
            for j in range(n):
                if j == i:
                    continue
                q = num[i, j] / z
                kl += P[i, j] * log(P[i, j] / q)
                coef = 4.0 * (P[i, j] - q) * num[i, j]
                for k in range(dim):
                    grad[i, k] += coef * (Y[i, k] - Y[j, k])
    return grad_arr, kl
