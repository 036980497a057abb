# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in _pykernels (same signatures, same maths)."""
import numpy as np
from libc.math cimport exp, expf, sqrt
from libc.stdlib cimport malloc, free

ctypedef fused floating:
    float
    double

cdef double GELU_K = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_C = 0.044715


cdef inline floating _exp(floating v) noexcept nogil:
    if floating is float:
        return expf(v)
    else:
        return exp(v)


cdef inline floating _sigmoid2(floating u) noexcept nogil:
    # 1 / (1 + e^{-2u}) = (1 + tanh u) / 2 without the cancellation of 1 + tanh for u << 0;
    # the clamp keeps e^{-2u} finite under -ffast-math
    cdef floating one = 1, lim = 40
    if u > lim:
        u = lim
    elif u < -lim:
        u = -lim
    return one / (one + _exp(-2 * u))


def scatter_add_rows(floating[:, ::1] out, const long[::1] ids, const floating[:, ::1] rows):
    cdef Py_ssize_t n = ids.shape[0], d = out.shape[1], i, j, r
    if rows.shape[0] != n or rows.shape[1] != d:
        raise ValueError("scatter_add_rows: rows shape does not match ids/out")
    for i in range(n):
        r = ids[i]
        if r < 0 or r >= out.shape[0]:
            raise IndexError("scatter_add_rows: id out of range")
        for j in range(d):
            out[r, j] += rows[i, j]


def gelu_forward(const floating[::1] x, floating[::1] out, floating[::1] t):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating xi, si, u
    cdef floating k = <floating> GELU_K, c = <floating> GELU_C
    for i in range(n):
        xi = x[i]
        u = k * xi * (1 + c * xi * xi)
        # exact saturation so t is exactly +-1 where the tanh has flattened out
        if u > 20:
            si = 1
        elif u < -20:
            si = 0
        else:
            si = _sigmoid2(u)
        t[i] = 2 * si - 1
        out[i] = xi * si


def gelu_backward(const floating[::1] x, const floating[::1] t, const floating[::1] g,
                  floating[::1] out):
    # recomputed from x in double: rebuilding 1 - t^2 from a rounded t would be
    # multiplied by x^3 and swamp the result for large |x|
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi, u, s
    for i in range(n):
        xi = x[i]
        u = GELU_K * xi * (1.0 + GELU_C * xi * xi)
        if u > 20:
            out[i] = g[i]
        elif u < -20:
            out[i] = 0
        else:
            s = 1.0 / (1.0 + exp(-2.0 * u))
            out[i] = g[i] * (s + 2.0 * s * (1.0 - s) * xi * GELU_K * (1.0 + 3.0 * GELU_C * xi * xi))


def softmax_rows(floating[:, ::1] z):
    """In-place, numerically stabilised softmax over each row."""
    cdef Py_ssize_t r, j, rows = z.shape[0], n = z.shape[1]
    cdef floating m, s
    for r in range(rows):
        m = z[r, 0]
        for j in range(1, n):
            if z[r, j] > m:
                m = z[r, j]
        s = 0
        for j in range(n):
            z[r, j] = _exp(z[r, j] - m)
            s += z[r, j]
        s = 1 / s
        for j in range(n):
            z[r, j] = z[r, j] * s


def softmax_backward(const floating[:, ::1] p, const floating[:, ::1] g, floating[:, ::1] out):
    cdef Py_ssize_t r, j, rows = p.shape[0], n = p.shape[1]
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * p[r, j]
        for j in range(n):
            out[r, j] = p[r, j] * (g[r, j] - dot)


def layer_norm_forward(const floating[:, ::1] x, const floating[::1] gamma, beta, double eps,
                       floating[:, ::1] out, floating[:, ::1] xhat, floating[::1] inv):
    cdef Py_ssize_t r, j, rows = x.shape[0], n = x.shape[1]
    cdef double mu, var, d, iv
    cdef const floating[::1] b
    cdef bint has_beta = beta is not None
    if has_beta:
        b = beta
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mu
            var += d * d
        var /= n
        iv = 1.0 / sqrt(var + eps)
        inv[r] = iv
        for j in range(n):
            d = (x[r, j] - mu) * iv
            xhat[r, j] = d
            if has_beta:
                out[r, j] = d * gamma[j] + b[j]
            else:
                out[r, j] = d * gamma[j]


def layer_norm_backward(const floating[:, ::1] g, const floating[:, ::1] xhat, const floating[::1] inv,
                        const floating[::1] gamma, floating[:, ::1] gx, floating[::1] ggamma,
                        floating[::1] gbeta, bint want_x):
    cdef Py_ssize_t r, j, rows = g.shape[0], n = g.shape[1]
    cdef double m1, m2, gh
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gh = g[r, j] * gamma[j]
            m1 += gh
            m2 += gh * xhat[r, j]
            ggamma[j] += g[r, j] * xhat[r, j]
            gbeta[j] += g[r, j]
        if want_x:
            m1 /= n
            m2 /= n
            for j in range(n):
                gx[r, j] = inv[r] * (g[r, j] * gamma[j] - m1 - xhat[r, j] * m2)


def lcs_length(a, b):
    cdef const long[::1] x = np.ascontiguousarray(a, dtype=np.int64)
    cdef const long[::1] y = np.ascontiguousarray(b, dtype=np.int64)
    if x.shape[0] < y.shape[0]:
        x, y = y, x
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef long *prev
    cdef long *cur
    cdef long *tmp
    cdef long best
    if m == 0:
        return 0
    prev = <long *> malloc((m + 1) * sizeof(long))
    cur = <long *> malloc((m + 1) * sizeof(long))
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    for j in range(m + 1):
        prev[j] = 0
    cur[0] = 0
    for i in range(n):
        for j in range(m):
            if x[i] == y[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    best = prev[m]
    free(prev)
    free(cur)
    return best
