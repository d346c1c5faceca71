from __future__ import annotations

import numpy as np

from ..tensor import ShapeError, softmax_backward, softmax_rows


def attend_dense(q, k, v, bias=None, mask=None, return_probs=False):
    """``softmax(q k^T / sqrt(d_h) + bias, mask) v`` per head.

    ``q`` is ``(h, Nq, d_h)``, ``k``/``v`` are ``(h, Nk, d_h)``; ``bias`` is
    ``(h, Nq, Nk)`` and ``mask`` a boolean ``(Nq, Nk)`` shared by all heads.
    This quadratic form is the reference every sparse mechanism is checked
    against.
    """
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attend_dense: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = q.shape[-1] ** -0.5
    s = np.matmul(q, np.swapaxes(k, 1, 2))
    s *= np.asarray(scale, s.dtype)
    if bias is not None:
        s += bias
    if mask is None:
        # s is our own buffer: normalise in place so only one N x N array is live
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        p = s
    else:
        p = softmax_rows(s, mask[None])
    out = np.matmul(p, v)
    return (out, p) if return_probs else out


def attend_dense_backward(q, k, v, probs, grad_out):
    """Return ``(dq, dk, dv, dscores)``; ``dscores`` is also the bias gradient."""
    scale = np.asarray(q.shape[-1] ** -0.5, q.dtype)
    dv = np.matmul(np.swapaxes(probs, 1, 2), grad_out)
    dp = np.matmul(grad_out, np.swapaxes(v, 1, 2))
    ds = softmax_backward(probs, dp)
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, 1, 2), q) * scale
    return dq, dk, dv, ds
