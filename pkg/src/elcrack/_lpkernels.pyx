# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for normalized L_p pooling and half-max thresholding.

All kernels operate row-wise on C-contiguous float64 arrays of shape
``(rows, n)``; each row is one flattened activation map.  The pure NumPy
module ``_lpfallback`` implements the same functions with identical
semantics and is used when this extension is not built.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow, isinf, floor

cnp.import_array()

DEF MAX_INT_POWER = 64


cdef inline double _ipow(double a, long k) noexcept nogil:
    # binary exponentiation; integer exponents cover every p in the sweep table
    cdef double r = 1.0
    while k:
        if k & 1:
            r *= a
        a *= a
        k >>= 1
    return r


cdef inline long _int_exponent(double q) noexcept nogil:
    """``q`` as an integer in [0, MAX_INT_POWER], or -1."""
    if q >= 0.0 and q <= MAX_INT_POWER and q == floor(q):
        return <long>q
    return -1


cdef inline double _row_forward(const double[::1] row, double p) noexcept nogil:
    cdef Py_ssize_t i, n = row.shape[0]
    cdef double m = 0.0, a, s = 0.0, inv
    cdef long k
    if p == 1.0:
        for i in range(n):
            s += fabs(row[i])
        return s / n
    for i in range(n):
        a = fabs(row[i])
        m = a if a > m else m
    if isinf(p) or m == 0.0:
        return m
    inv = 1.0 / m
    k = _int_exponent(p)
    if isinf(inv):
        # subnormal max: the reciprocal overflows, divide instead
        for i in range(n):
            s += pow(fabs(row[i]) / m, p)
    elif k == 2:
        for i in range(n):
            a = row[i] * inv
            s += a * a
    elif k > 0:
        for i in range(n):
            s += _ipow(fabs(row[i]) * inv, k)
    else:
        for i in range(n):
            s += pow(fabs(row[i]) * inv, p)
    return m * pow(s / n, 1.0 / p)


def lp_forward(const double[:, ::1] x, double p):
    """Normalized L_p norm of every row of ``x``; ``p`` may be ``inf``."""
    cdef Py_ssize_t r, rows = x.shape[0]
    out = np.empty(rows, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for r in range(rows):
            o[r] = _row_forward(x[r], p)
    return out


def lp_backward(const double[:, ::1] x, double p, const double[::1] upstream,
                double eps):
    """Gradient of :func:`lp_forward` w.r.t. ``x`` scaled by ``upstream``.

    For ``p == inf`` the whole upstream value is routed to the first
    element (in scan order) of maximal absolute value.
    """
    cdef Py_ssize_t r, i, k, rows = x.shape[0], n = x.shape[1]
    grad = np.zeros((rows, n), dtype=np.float64)
    cdef double[:, ::1] g = grad
    cdef double lp, a, m, scale, inv
    cdef long e = _int_exponent(p - 1.0)
    with nogil:
        for r in range(rows):
            if isinf(p):
                k = 0
                m = -1.0
                for i in range(n):
                    a = fabs(x[r, i])
                    if a > m:
                        m = a
                        k = i
                if x[r, k] > 0.0:
                    g[r, k] = upstream[r]
                elif x[r, k] < 0.0:
                    g[r, k] = -upstream[r]
                continue
            if p == 1.0:
                scale = upstream[r] / n
                for i in range(n):
                    if x[r, i] > 0.0:
                        g[r, i] = scale
                    elif x[r, i] < 0.0:
                        g[r, i] = -scale
                continue
            lp = _row_forward(x[r], p)
            if lp < eps:
                lp = eps
            scale = upstream[r] / n
            inv = 1.0 / lp
            if isinf(inv):
                for i in range(n):
                    if x[r, i] != 0.0:
                        m = scale * pow(fabs(x[r, i]) / lp, p - 1.0)
                        g[r, i] = m if x[r, i] > 0.0 else -m
                continue
            for i in range(n):
                a = x[r, i]
                if a == 0.0:
                    continue
                if e >= 0:
                    m = scale * _ipow(fabs(a) * inv, e)
                else:
                    m = scale * pow(fabs(a) * inv, p - 1.0)
                g[r, i] = m if a > 0.0 else -m
    return grad


def half_max_threshold(const double[:, ::1] x, bint invert):
    """Row-wise ``y_i > max(y) / 2`` mask, applied to ``-x`` when ``invert``.

    A constant row has no contrast and yields an all-zero mask.
    """
    cdef Py_ssize_t r, i, rows = x.shape[0], n = x.shape[1]
    mask = np.zeros((rows, n), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] mk = mask
    cdef double sign = -1.0 if invert else 1.0
    cdef double m, lo, v
    with nogil:
        for r in range(rows):
            if n == 0:
                continue
            m = sign * x[r, 0]
            lo = m
            for i in range(1, n):
                v = sign * x[r, i]
                m = v if v > m else m
                lo = v if v < lo else lo
            if m == lo:
                continue
            for i in range(n):
                mk[r, i] = 2.0 * (sign * x[r, i]) > m
    return mask
