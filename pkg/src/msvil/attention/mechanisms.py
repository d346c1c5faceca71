"""Multi-head self-attention blocks for every mechanism, forward and backward.

``msa_forward`` computes ``x + MSA_a(LN(x))`` with shared Q/K/V/O projections
for global and local tokens; ``msa_backward`` returns exact gradients for the
tokens and every trainable parameter.
"""

from __future__ import annotations

import numpy as np

from ..posenc import rpb_bias_backward, rpb_bias_matrix
from ..tensor import layer_norm, layer_norm_backward, linear, linear_backward
from .chunk import vil_chunk_attend, vil_chunk_backward
from .dense import attend_dense, attend_dense_backward
from .masks import build_global_mask, vil_local_layout, with_globals
from .performer import performer_attend, performer_backward
from .spec import AttentionSpec, Kind, MsaParams


def split_heads(x, h):
    N, d = x.shape
    return np.ascontiguousarray(x.reshape(N, h, d // h).transpose(1, 0, 2))


def merge_heads(x):
    h, N, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(N, h * dh)


def grid_to_patches(grid, p):
    """``(H, W, c)`` -> ``(H/p * W/p, p*p*c)``, patch rows ordered ``(py, px, c)``."""
    H, W, c = grid.shape
    if H % p or W % p:
        raise ValueError(f"grid {H}x{W} is not divisible by patch size {p}")
    g = grid.reshape(H // p, p, W // p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(g).reshape((H // p) * (W // p), p * p * c)


def patches_to_grid(patches, H, W, p):
    c = patches.shape[1] // (p * p)
    g = patches.reshape(H // p, W // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(g).reshape(H, W, c)


def _check_grid(spec, grid, N):
    if grid is None:
        if spec.kind in (Kind.FULL, Kind.PERFORMER):
            return None
        raise ValueError(f"{spec.kind.value} attention needs the local grid (H, W)")
    H, W = grid
    if N != spec.n_g + H * W:
        raise ValueError(f"expected {spec.n_g} + {H}*{W} tokens, got {N}")
    return H, W


def _vil_dense_layout(spec, H, W):
    local, dy, dx = vil_local_layout(H, W, spec.window, spec.masking, spec.shift)
    return with_globals(local, spec.n_g), (dy, dx)


def msa_forward(tokens, params: MsaParams, spec: AttentionSpec, grid=None, impl="chunk",
                strict=False):
    """Return ``(tokens + MSA(LN(tokens)), cache)``.

    ``grid`` is the ``(H, W)`` local grid; locals follow the ``n_g`` global
    tokens in row-major order. ``impl="dense"`` runs ViL through the
    masked-dense reference instead of the sliding-chunk kernel.
    """
    N, d = tokens.shape
    if d != spec.dim:
        raise ValueError(f"token dim {d} does not match spec dim {spec.dim}")
    grid = _check_grid(spec, grid, N)
    h, n_g = spec.heads, spec.n_g
    rpb = params.rpb
    if rpb is not None and spec.kind not in (Kind.FULL, Kind.VIL, Kind.GLOBAL):
        raise ValueError(f"relative positional bias is not defined for {spec.kind.value}")

    y = layer_norm(tokens, params.ln_g, params.ln_b)
    q = split_heads(linear(y, params.wq, params.bq), h)
    cache = {"x": tokens, "y": y, "q": q, "grid": grid, "impl": impl}

    if spec.kind is Kind.SRA:
        kv_in, sra = _sra_reduce(y, params, spec, grid)
        cache["sra"] = sra
    else:
        kv_in = y
    cache["kv_in"] = kv_in
    k = split_heads(linear(kv_in, params.wk, params.bk), h)
    v = split_heads(linear(kv_in, params.wv, params.bv), h)
    cache["k"], cache["v"] = k, v

    kind = spec.kind
    if kind is Kind.VIL and impl == "chunk":
        H, W = grid
        o, cache["chunk"] = vil_chunk_attend(q, k, v, H, W, n_g, spec.window, spec.masking,
                                             spec.shift, rpb)
    elif kind is Kind.PERFORMER:
        o, cache["performer"] = performer_attend(q, k, v, params.omega, strict)
    elif kind is Kind.LINFORMER:
        kp, vp = _linformer_project(k, v, params.proj, n_g)
        o, probs = attend_dense(q, kp, vp, return_probs=True)
        cache["probs"], cache["kp"], cache["vp"] = probs, kp, vp
    else:
        mask, bias, offsets = None, None, None
        if kind is Kind.VIL:
            if impl != "dense":
                raise ValueError(f"unknown ViL implementation {impl!r}")
            mask, offsets = _vil_dense_layout(spec, *grid)
        elif kind is Kind.GLOBAL:
            mask = build_global_mask(n_g, grid[0] * grid[1])
        if rpb is not None:
            H, W = grid
            bias = rpb_bias_matrix(rpb, H, W, n_g, mask, offsets)
        o, probs = attend_dense(q, k, v, bias, mask, return_probs=True)
        cache["probs"], cache["offsets"] = probs, offsets

    om = merge_heads(o)
    cache["o"] = om
    out = tokens + linear(om, params.wo, params.bo)
    return out, cache


def _linformer_project(k, v, proj, n_g):
    n_l = k.shape[1] - n_g
    if proj is None or proj.shape[1] != n_l:
        bound = None if proj is None else proj.shape[1]
        raise ValueError(f"Linformer projection is bound to n_l={bound}, got n_l={n_l}")
    kp = np.concatenate([k[:, :n_g], np.matmul(proj, k[:, n_g:])], axis=1)
    vp = np.concatenate([v[:, :n_g], np.matmul(proj, v[:, n_g:])], axis=1)
    return kp, vp


def _sra_reduce(y, params, spec, grid):
    """Keys/values source: globals unchanged, locals through an R x R stride-R conv + LN."""
    R = spec.sr_ratio
    H, W = grid
    if H % R or W % R:
        raise ValueError(f"SRA ratio {R} must divide the grid {H}x{W}")
    n_g = spec.n_g
    if R == 1 and params.sr_w is None:
        return y, None
    d = y.shape[1]
    patches = grid_to_patches(y[n_g:].reshape(H, W, d), R)
    w2 = params.sr_w.reshape(R * R * d, d)
    z = linear(patches, w2, params.sr_b)
    zn = layer_norm(z, params.sr_ln_g, params.sr_ln_b)
    return np.concatenate([y[:n_g], zn], axis=0), {"patches": patches, "z": z}


def msa_backward(cache, params: MsaParams, spec: AttentionSpec, grad_out):
    """Return ``(grad_tokens, grads)`` with ``grads`` keyed like ``params.trainable()``."""
    x = cache["x"]
    if grad_out.shape != x.shape:
        raise ValueError(f"grad shape {grad_out.shape} does not match tokens {x.shape}")
    h, n_g = spec.heads, spec.n_g
    grads = {}
    dom, grads["wo"], grads["bo"] = linear_backward(cache["o"], params.wo, grad_out)
    do = split_heads(dom, h)
    q, k, v = cache["q"], cache["k"], cache["v"]
    kind = spec.kind
    drpb = None

    if "chunk" in cache:
        dq, dk, dv, drpb = vil_chunk_backward(cache["chunk"], do)
    elif kind is Kind.PERFORMER:
        dq, dk, dv = performer_backward(cache["performer"], do)
    elif kind is Kind.LINFORMER:
        dq, dkp, dvp, _ = attend_dense_backward(q, cache["kp"], cache["vp"], cache["probs"], do)
        P = params.proj
        dk = np.concatenate([dkp[:, :n_g], np.matmul(P.T, dkp[:, n_g:])], axis=1)
        dv = np.concatenate([dvp[:, :n_g], np.matmul(P.T, dvp[:, n_g:])], axis=1)
        grads["proj"] = (
            np.einsum("hkd,hnd->kn", dkp[:, n_g:], k[:, n_g:])
            + np.einsum("hkd,hnd->kn", dvp[:, n_g:], v[:, n_g:])
        )
    else:
        dq, dk, dv, ds = attend_dense_backward(q, k, v, cache["probs"], do)
        if params.rpb is not None:
            H, W = cache["grid"]
            drpb = rpb_bias_backward(params.rpb, H, W, n_g, ds, cache["offsets"])

    kv_in = cache["kv_in"]
    dkv_in, grads["wk"], grads["bk"] = linear_backward(kv_in, params.wk, merge_heads(dk))
    d2, grads["wv"], grads["bv"] = linear_backward(kv_in, params.wv, merge_heads(dv))
    dkv_in += d2
    y = cache["y"]
    dy, grads["wq"], grads["bq"] = linear_backward(y, params.wq, merge_heads(dq))

    if kind is Kind.SRA and cache.get("sra") is not None:
        sra = cache["sra"]
        H, W = cache["grid"]
        R = spec.sr_ratio
        d = y.shape[1]
        dy[:n_g] += dkv_in[:n_g]
        dz, grads["sr_ln_g"], grads["sr_ln_b"] = layer_norm_backward(
            sra["z"], params.sr_ln_g, dkv_in[n_g:])
        dpatch, dw2, grads["sr_b"] = linear_backward(
            sra["patches"], params.sr_w.reshape(R * R * d, d), dz)
        grads["sr_w"] = dw2.reshape(params.sr_w.shape)
        dy[n_g:] += patches_to_grid(dpatch, H, W, R).reshape(H * W, d)
    else:
        dy += dkv_in

    dx, grads["ln_g"], grads["ln_b"] = layer_norm_backward(x, params.ln_g, dy)
    dx += grad_out
    if drpb is not None:
        grads["rpb_table"] = drpb.table
        grads["rpb_global"] = drpb.global_bias
    return dx, grads


def _as_kind(spec, kind):
    if spec.kind is not kind:
        raise ValueError(f"expected a {kind.value} spec, got {spec.kind.value}")


def vil_sliding_chunk_forward(tokens, params, spec, grid):
    _as_kind(spec, Kind.VIL)
    return msa_forward(tokens, params, spec, grid, impl="chunk")


def global_attention_forward(tokens, params, spec, grid):
    _as_kind(spec, Kind.GLOBAL)
    return msa_forward(tokens, params, spec, grid)


def linformer_forward(tokens, params, spec, grid):
    _as_kind(spec, Kind.LINFORMER)
    return msa_forward(tokens, params, spec, grid)


def sra_forward(tokens, params, spec, grid):
    _as_kind(spec, Kind.SRA)
    return msa_forward(tokens, params, spec, grid)


def performer_forward(tokens, params, spec, grid=None, strict=False):
    _as_kind(spec, Kind.PERFORMER)
    return msa_forward(tokens, params, spec, grid, strict=strict)
