"""Pure NumPy implementations of the kernels in ``_lpkernels.pyx``.

Same signatures and semantics; inputs are C-contiguous float64 arrays of
shape ``(rows, n)``.
"""

import numpy as np


def lp_forward(x, p):
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    if p == 1.0:
        return a.sum(axis=1) / x.shape[1]
    m = a.max(axis=1) if x.shape[1] else np.zeros(x.shape[0])
    if np.isinf(p):
        return m
    out = np.zeros(x.shape[0], dtype=np.float64)
    nz = m > 0.0
    if nz.any():
        ratio = a[nz] / m[nz, None]
        s = np.power(ratio, p).sum(axis=1)
        out[nz] = m[nz] * np.power(s / x.shape[1], 1.0 / p)
    return out


def lp_backward(x, p, upstream, eps):
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    rows, n = x.shape
    grad = np.zeros((rows, n), dtype=np.float64)
    if np.isinf(p):
        k = np.argmax(np.abs(x), axis=1)
        r = np.arange(rows)
        grad[r, k] = np.sign(x[r, k]) * upstream
        return grad
    sign = np.sign(x)
    if p == 1.0:
        return sign * (upstream / n)[:, None]
    lp = np.maximum(lp_forward(x, p), eps)
    grad = sign * np.power(np.abs(x) / lp[:, None], p - 1.0)
    return grad * (upstream / n)[:, None]


def half_max_threshold(x, invert):
    x = np.asarray(x, dtype=np.float64)
    y = -x if invert else x
    if y.shape[1] == 0:
        return np.zeros(y.shape, dtype=np.uint8)
    m = y.max(axis=1, keepdims=True)
    flat = m == y.min(axis=1, keepdims=True)
    return ((2.0 * y > m) & ~flat).astype(np.uint8)
