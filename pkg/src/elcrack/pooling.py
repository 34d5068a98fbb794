"""Normalized L_p pooling: ``((1/N) * sum |y_i|^p) ** (1/p)`` over a whole map.

``p = 1`` is average pooling of ``|y|`` and ``p = inf`` is max pooling of
``|y|``.  The forward pass factors out ``max |y|`` so that large exponents
do not overflow.  The numerical work is done by :mod:`elcrack.kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from elcrack import kernels

INF = math.inf


def parse_p(value) -> float:
    """Parse an exponent given as a number or as ``"inf"``/``"∞"``."""
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("inf", "infinity", "∞", "max"):
            return INF
        value = float(text)
    return float(value)


def format_p(p: float) -> str:
    if math.isinf(p):
        return "inf"
    return f"{p:g}"


@dataclass(frozen=True)
class PoolingSpec:
    """Exponent of the pooling head.

    ``p`` is a finite value ``>= 1`` or :data:`INF`.  ``epsilon`` guards the
    division by ``L_p(y)`` in the backward pass when a map is all zeros.
    """

    p: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self):
        p = parse_p(self.p)
        object.__setattr__(self, "p", p)
        if math.isnan(p) or p < 1.0:
            raise ValueError(f"pooling exponent must be >= 1 or inf, got {p}")
        if not (0.0 < self.epsilon < 1e-6):
            raise ValueError(f"epsilon must lie in (0, 1e-6), got {self.epsilon}")

    @property
    def is_max(self) -> bool:
        return math.isinf(self.p)

    def label(self) -> str:
        return f"L_{format_p(self.p)}"


def _as_spec(spec) -> PoolingSpec:
    if isinstance(spec, PoolingSpec):
        return spec
    return PoolingSpec(p=spec)


def _rows(maps) -> np.ndarray:
    x = np.ascontiguousarray(maps, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot pool an empty map (N must be >= 1)")
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.isfinite(x.ravel()))[0]
        raise ValueError(f"map contains non-finite value {x.ravel()[bad]!r} at flat index {bad}")
    return x


def lp_pool_forward(values, spec) -> float:
    """Pool one map (any shape, flattened) to a non-negative scalar.

    ``spec`` is a :class:`PoolingSpec` or a bare exponent.
    """
    spec = _as_spec(spec)
    x = _rows(values).reshape(1, -1)
    return float(kernels.lp_forward(x, spec.p)[0])


def lp_pool_backward(values, spec, upstream: float = 1.0) -> np.ndarray:
    """Gradient of :func:`lp_pool_forward` w.r.t. every element, times ``upstream``.

    For ``p = inf`` the gradient goes to the first maximal ``|y_i|``.
    The result has the shape of ``values``.
    """
    spec = _as_spec(spec)
    x = _rows(values)
    shape = x.shape
    grad = kernels.lp_backward(
        x.reshape(1, -1), spec.p, np.array([float(upstream)]), spec.epsilon
    )
    return np.asarray(grad).reshape(shape)


def lp_pool_rows(rows, spec) -> np.ndarray:
    """Vectorized forward over a ``(rows, N)`` array; one score per row."""
    spec = _as_spec(spec)
    x = _rows(rows)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D (rows, N) array, got shape {x.shape}")
    return np.asarray(kernels.lp_forward(x, spec.p))


class _LpPoolFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, maps, p, eps):
        b, c = maps.shape[:2]
        rows = maps.detach().reshape(b * c, -1).to("cpu", torch.float64).numpy()
        rows = np.ascontiguousarray(rows)
        if not np.all(np.isfinite(rows)):
            raise FloatingPointError("non-finite activation map entering L_p pooling")
        out = kernels.lp_forward(rows, p)
        ctx.save_for_backward(maps)
        ctx.p = p
        ctx.eps = eps
        return torch.from_numpy(np.asarray(out)).to(maps.device, maps.dtype).reshape(b, c)

    @staticmethod
    def backward(ctx, grad_out):
        (maps,) = ctx.saved_tensors
        b, c = maps.shape[:2]
        rows = np.ascontiguousarray(
            maps.detach().reshape(b * c, -1).to("cpu", torch.float64).numpy()
        )
        up = np.ascontiguousarray(grad_out.detach().reshape(-1).to("cpu", torch.float64).numpy())
        grad = kernels.lp_backward(rows, ctx.p, up, ctx.eps)
        grad = torch.from_numpy(np.asarray(grad)).to(maps.device, maps.dtype)
        return grad.reshape(maps.shape), None, None


class LpPool(nn.Module):
    """Global normalized L_p pooling, applied to each channel separately.

    Input ``[B, C, H, W]`` (or ``[B, C, N]``), output ``[B, C]``.
    """

    def __init__(self, spec: PoolingSpec | float = 1.0):
        super().__init__()
        self.spec = _as_spec(spec)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        if maps.dim() < 3:
            raise ValueError(f"expected [B, C, ...] maps, got shape {tuple(maps.shape)}")
        return _LpPoolFunction.apply(maps, self.spec.p, self.spec.epsilon)

    def extra_repr(self) -> str:
        return f"p={format_p(self.spec.p)}"
