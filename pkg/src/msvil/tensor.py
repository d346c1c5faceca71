"""Dense numeric primitives shared by every other module.

Arrays are plain :class:`numpy.ndarray` values; float32 is the default compute
type and float64 is used by the oracle and gradient-check paths. Each
differentiable primitive comes with an explicit ``*_backward`` companion
instead of an autodiff tape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def make_rng(seed: int | np.random.Generator | None = 0) -> np.random.Generator:
    """Return a PCG64 generator; identical seeds give identical streams on every platform."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with an informative shape error."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def softmax_rows(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis.

    Masked-out entries (``mask == False``) come back exactly zero. A row with
    no unmasked entry is an error.
    """
    if mask is None:
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    mask = np.broadcast_to(mask, scores.shape)
    alive = mask.any(axis=-1)
    if not alive.all():
        bad = np.argwhere(~alive)[0]
        raise ValueError(f"softmax row {tuple(int(i) for i in bad)} is fully masked")
    neg = np.asarray(-np.inf, dtype=scores.dtype)
    masked = np.where(mask, scores, neg)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient of the scores given softmax output ``probs`` and upstream ``grad``."""
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = LN_EPS):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def layer_norm_backward(x, gamma, grad, eps: float = LN_EPS):
    """Return ``(dx, dgamma, dbeta)``; statistics are recomputed from ``x``."""
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    lead = tuple(range(x.ndim - 1))
    dgamma = (grad * xhat).sum(axis=lead)
    dbeta = grad.sum(axis=lead)
    g = grad * gamma
    dx = rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d)
    return dx, dgamma, dbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return x * (0.5 * (1.0 + erf(x * _SQRT_HALF))).astype(x.dtype, copy=False)


def gelu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (grad * (cdf + x * pdf)).astype(x.dtype, copy=False)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else y + b


def linear_backward(x, w, grad):
    """Return ``(dx, dw, db)`` for ``y = x @ w + b`` with ``x`` of shape (..., d_in)."""
    dx = matmul(grad, w.T)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    return dx, x2.T @ g2, g2.sum(axis=0)


def _axis_weights(n_src: int, n_dst: int):
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def bilinear_resize(grid: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Align-corners bilinear resize of an ``h x w x c`` grid."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"bilinear_resize target must be positive, got {new_h}x{new_w}")
    h, w = grid.shape[:2]
    if (h, w) == (new_h, new_w):
        return grid.copy()
    y0, y1, fy = _axis_weights(h, new_h)
    x0, x1, fx = _axis_weights(w, new_w)
    fy = fy.astype(grid.dtype)[:, None, None]
    fx = fx.astype(grid.dtype)[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def trunc_normal_init(shape, std: float, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Draw from N(0, std^2) truncated to [-2 std, 2 std] by rejection."""
    if std <= 0:
        raise ValueError("std must be positive")
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
