"""Brute-force references used to validate the fast paths.

Nothing here imports the attention or tensor modules: the references are
written from scratch so that a bug in a shared helper cannot hide itself.
They are deliberately slow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORACLE_CAP = 512


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def masked_dense_reference(tokens, params, heads, mask=None, bias=None):
    """``tokens + W_o(softmax(QK^T/sqrt(d_h) + bias, mask) V)`` with explicit per-head loops.

    ``params`` is any object exposing ``ln_g, ln_b, wq, bq, wk, bk, wv, bv,
    wo, bo``. ``mask`` is ``(N, N)`` boolean, ``bias`` is ``(heads, N, N)``.
    """
    N, d = tokens.shape
    if N > ORACLE_CAP:
        raise ValueError(f"oracle is capped at N <= {ORACLE_CAP}, got {N}")
    dh = d // heads
    y = _ln(tokens, params.ln_g, params.ln_b)
    Q = y @ params.wq + params.bq
    K = y @ params.wk + params.bk
    V = y @ params.wv + params.bv
    out = np.zeros_like(Q)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(dh)
        if bias is not None:
            s = s + bias[hd]
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        out[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ V[:, sl]
    return tokens + out @ params.wo + params.bo


def _attend_loop(Q, K, V, heads):
    dh = Q.shape[1] // heads
    out = np.zeros((Q.shape[0], V.shape[1]))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(dh)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ V[:, sl]
    return out


def linformer_reference(tokens, params, heads, n_g):
    """Locals' keys/values mixed by ``params.proj`` (K x n_l); globals passed through."""
    y = _ln(tokens, params.ln_g, params.ln_b)
    Q = y @ params.wq + params.bq
    K = y @ params.wk + params.bk
    V = y @ params.wv + params.bv
    K = np.concatenate([K[:n_g], params.proj @ K[n_g:]])
    V = np.concatenate([V[:n_g], params.proj @ V[n_g:]])
    return tokens + _attend_loop(Q, K, V, heads) @ params.wo + params.bo


def sra_reference(tokens, params, heads, n_g, H, W, R):
    """Keys/values from an explicit R x R stride-R convolution over the local grid, then LN."""
    y = _ln(tokens, params.ln_g, params.ln_b)
    d = y.shape[1]
    if R > 1:
        grid = y[n_g:].reshape(H, W, d)
        red = []
        for i in range(H // R):
            for j in range(W // R):
                acc = params.sr_b.astype(np.float64).copy()
                for a in range(R):
                    for b in range(R):
                        acc = acc + grid[i * R + a, j * R + b] @ params.sr_w[a, b]
                red.append(acc)
        kv_src = np.concatenate([y[:n_g], _ln(np.array(red), params.sr_ln_g, params.sr_ln_b)])
    else:
        kv_src = y
    Q = y @ params.wq + params.bq
    K = kv_src @ params.wk + params.bk
    V = kv_src @ params.wv + params.bv
    return tokens + _attend_loop(Q, K, V, heads) @ params.wo + params.bo


def performer_reference(tokens, params, heads):
    """Random-feature attention written without any numerical stabiliser."""
    y = _ln(tokens, params.ln_g, params.ln_b)
    Q = y @ params.wq + params.bq
    K = y @ params.wk + params.bk
    V = y @ params.wv + params.bv
    dh = Q.shape[1] // heads
    om = params.omega
    m = om.shape[0]
    out = np.zeros_like(Q)

    def phi(x):
        x = x / dh ** 0.25
        return np.exp(x @ om.T - 0.5 * (x ** 2).sum(axis=1, keepdims=True)) / np.sqrt(m)

    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        fq, fk = phi(Q[:, sl]), phi(K[:, sl])
        w = fq @ fk.T
        out[:, sl] = (w / w.sum(axis=1, keepdims=True)) @ V[:, sl]
    return tokens + out @ params.wo + params.bo


def per_token_reference(q, k, v, mask, bias=None):
    """Gather-and-softmax one query at a time; ``q, k, v`` are ``(h, N, d_h)``."""
    h, N, dh = q.shape
    out = np.zeros_like(q)
    for hd in range(h):
        for i in range(N):
            keys = np.flatnonzero(mask[i])
            s = np.array([q[hd, i] @ k[hd, j] for j in keys]) / np.sqrt(dh)
            if bias is not None:
                s = s + bias[hd, i, keys]
            w = np.exp(s - s.max())
            w /= w.sum()
            out[hd, i] = sum(wj * v[hd, j] for wj, j in zip(w, keys))
    return out


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (perturbed in place, restored)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at index {i}")
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    """Per-tensor worst relative error between analytic and numeric gradients.

    Elements whose absolute disagreement is below ``atol`` are not counted:
    a gradient that is exactly zero (a key bias under softmax, say) is only
    resolved by central differences down to roundoff, so its relative error
    is meaningless.
    """

    step: float
    atol: float
    max_rel: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def grad_check(f, tensors: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
               h: float = 1e-5, floor: float = 1e-8, atol: float = 1e-9) -> GradCheckReport:
    """Compare analytic gradients against central differences for each named tensor."""
    report = GradCheckReport(step=h, atol=atol)
    for name, x in tensors.items():
        num = finite_diff_grad(f, x, h)
        ana = np.asarray(analytic[name], dtype=np.float64)
        if ana.shape != num.shape:
            raise ValueError(f"{name}: analytic gradient shape {ana.shape} != {num.shape}")
        absdiff = np.abs(num - ana)
        err = np.where(absdiff > atol, relative_error(num, ana, floor), 0.0)
        report.max_abs[name] = float(absdiff.max()) if absdiff.size else 0.0
        report.max_rel[name] = float(err.max()) if err.size else 0.0
        idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        report.worst_index[name] = tuple(int(i) for i in idx)
    return report
