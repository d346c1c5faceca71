"""Sliding-chunk Vision Longformer attention with an analytic backward.

The local grid is cut into ``c x c`` chunks (``c = (window + 1) // 2``). Every
local query in a chunk scores the keys of its 3x3 chunk neighbourhood plus all
global tokens; global queries score everything through a dense row block. The
dense ``N x N`` score matrix is never formed for local queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..posenc import G2G, G2L, L2G, RpbTable
from .masks import active_slots
from .spec import MaskingMode


@dataclass(frozen=True)
class ChunkLayout:
    H: int
    W: int
    c: int
    ncy: int
    ncx: int
    ny: np.ndarray  # (ncy, ncx, S) neighbour chunk row per slot
    nx: np.ndarray
    valid: np.ndarray  # (ncy, ncx, S)
    mask: np.ndarray  # (ncy, ncx, c*c, S*c*c), query-real and key-admitted
    query_real: np.ndarray  # (ncy, ncx, c*c)
    dy: np.ndarray  # (c*c, S*c*c) key-minus-query offsets
    dx: np.ndarray
    attended: np.ndarray  # (c*c, S*c*c) offset used by at least one real pair

    @property
    def n_slots(self) -> int:
        return self.ny.shape[-1]


def chunk_layout(H, W, window, masking=MaskingMode.NOPAD, shift=0) -> ChunkLayout:
    """Chunk neighbourhood tables for one geometry; memoized, arrays are read-only."""
    return _chunk_layout(int(H), int(W), int(window), MaskingMode(masking), int(shift))


@lru_cache(maxsize=512)
def _chunk_layout(H, W, window, masking, shift) -> ChunkLayout:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    masking = MaskingMode(masking)
    c = (window + 1) // 2
    r = (window - 1) // 2
    ncy, ncx = -(-H // c), -(-W // c)
    slots = np.array(active_slots(shift))
    S = len(slots)
    cy = np.arange(ncy)[:, None, None]
    cx = np.arange(ncx)[None, :, None]
    ty = np.broadcast_to(cy + slots[:, 0], (ncy, ncx, S))
    tx = np.broadcast_to(cx + slots[:, 1], (ncy, ncx, S))
    if masking is MaskingMode.CYCLIC:
        ty, tx = ty % ncy, tx % ncx
        valid = np.ones((ncy, ncx, S), dtype=bool)
        tid = ty * ncx + tx
        for s in range(1, S):
            # a chunk reachable through two slots (tiny chunk grids) is kept once
            valid[..., s] = (tid[..., s:s + 1] != tid[..., :s]).all(axis=-1)
    else:
        valid = (ty >= 0) & (ty < ncy) & (tx >= 0) & (tx < ncx)
        ty, tx = np.clip(ty, 0, ncy - 1), np.clip(tx, 0, ncx - 1)

    iy, ix = np.divmod(np.arange(c * c), c)
    key_y = (slots[:, 0, None] * c + iy[None, :]).reshape(-1)
    key_x = (slots[:, 1, None] * c + ix[None, :]).reshape(-1)
    dy = key_y[None, :] - iy[:, None]
    dx = key_x[None, :] - ix[:, None]

    key_real = (
        (ty[..., None] * c + iy < H) & (tx[..., None] * c + ix < W) & valid[..., None]
    ).reshape(ncy, ncx, 1, S * c * c)
    query_real = (cy * c + iy < H) & (np.arange(ncx)[None, :, None] * c + ix < W)
    mask = key_real & query_real[..., None]
    if masking is MaskingMode.EXACT:
        mask = mask & ((np.abs(dy) <= r) & (np.abs(dx) <= r))
    attended = mask.any(axis=(0, 1))
    arrays = [np.ascontiguousarray(a) for a in (ty, tx, valid, mask, query_real, dy, dx, attended)]
    for a in arrays:
        a.flags.writeable = False
    return ChunkLayout(H, W, c, ncy, ncx, *arrays)


def _to_chunks(t, L: ChunkLayout):
    """``(h, H*W, e)`` -> ``(h, ncy, ncx, c*c, e)`` with zero padding."""
    h, _, e = t.shape
    c = L.c
    g = np.zeros((h, L.ncy * c, L.ncx * c, e), dtype=t.dtype)
    g[:, :L.H, :L.W] = t.reshape(h, L.H, L.W, e)
    g = g.reshape(h, L.ncy, c, L.ncx, c, e).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(g).reshape(h, L.ncy, L.ncx, c * c, e)


def _from_chunks(t, L: ChunkLayout):
    h, e = t.shape[0], t.shape[-1]
    c = L.c
    g = t.reshape(h, L.ncy, L.ncx, c, c, e).transpose(0, 1, 3, 2, 4, 5)
    g = g.reshape(h, L.ncy * c, L.ncx * c, e)[:, :L.H, :L.W]
    return np.ascontiguousarray(g).reshape(h, L.H * L.W, e)


def _gather(t, L: ChunkLayout):
    """Neighbourhood keys: ``(h, ncy, ncx, S*c*c, e)``."""
    h, e = t.shape[0], t.shape[-1]
    return t[:, L.ny, L.nx].reshape(h, L.ncy, L.ncx, -1, e)


def _scatter(t_nb, L: ChunkLayout):
    """Adjoint of :func:`_gather`; masked slots carry zero gradient and are skipped."""
    h, e = t_nb.shape[0], t_nb.shape[-1]
    c2 = L.c * L.c
    t5 = t_nb.reshape(h, L.ncy, L.ncx, L.n_slots, c2, e)
    out = np.zeros((h, L.ncy, L.ncx, c2, e), dtype=t_nb.dtype)
    for s in range(L.n_slots):
        v = L.valid[..., s]
        # slot s maps source chunks to targets injectively
        out[:, L.ny[..., s][v], L.nx[..., s][v]] += t5[:, :, :, s][:, v]
    return out


def _masked_softmax(s, mask):
    s = np.where(mask, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(s - m)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z > 0, z, 1)


def _local_bias(rpb: RpbTable, L: ChunkLayout):
    r = rpb.dmax - 1
    if np.any(L.attended & ((np.abs(L.dy) > r) | (np.abs(L.dx) > r))):
        raise ValueError(f"chunk neighbourhood offsets exceed RPB range +-{r}")
    return rpb.table[:, np.clip(L.dy, -r, r) + r, np.clip(L.dx, -r, r) + r]


@dataclass
class ChunkCache:
    layout: ChunkLayout
    n_g: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    qc: np.ndarray
    kc: np.ndarray
    vc: np.ndarray
    p_loc: np.ndarray  # (h, ncy, ncx, c*c, n_g + S*c*c)
    p_glob: np.ndarray | None  # (h, n_g, N)
    rpb: RpbTable | None


def vil_chunk_attend(q, k, v, H, W, n_g, window, masking=MaskingMode.NOPAD, shift=0,
                     rpb: RpbTable | None = None):
    """Sliding-chunk attention on ``(h, n_g + H*W, d_h)`` projections.

    Returns ``(out, cache)``; ``out`` matches the masked-dense reference under
    :func:`~msvil.attention.masks.build_vil_mask` with the same arguments.
    """
    h, N, dh = q.shape
    if N != n_g + H * W:
        raise ValueError(f"expected {n_g} + {H}*{W} tokens, got {N}")
    L = chunk_layout(H, W, window, masking, shift)
    scale = np.asarray(dh ** -0.5, q.dtype)
    qc = _to_chunks(q[:, n_g:], L)
    kc = _to_chunks(k[:, n_g:], L)
    vc = _to_chunks(v[:, n_g:], L)
    knb = _gather(kc, L)
    vnb = _gather(vc, L)

    s_loc = np.matmul(qc, np.swapaxes(knb, -1, -2)) * scale
    if rpb is not None:
        s_loc += _local_bias(rpb, L)[:, None, None]
    kg, vg = k[:, :n_g], v[:, :n_g]
    if n_g:
        s_g = np.matmul(qc, np.swapaxes(kg, 1, 2)[:, None, None]) * scale
        if rpb is not None:
            s_g += rpb.global_bias[:, L2G, None, None, None, None]
        s = np.concatenate([s_g, s_loc], axis=-1)
        gmask = np.broadcast_to(L.query_real[..., None], L.query_real.shape + (n_g,))
        mask = np.concatenate([gmask, L.mask], axis=-1)
    else:
        s, mask = s_loc, L.mask
    p = _masked_softmax(s, mask)
    out_c = np.matmul(p[..., n_g:], vnb)
    if n_g:
        out_c += np.matmul(p[..., :n_g], vg[:, None, None])

    out = np.empty_like(q)
    out[:, n_g:] = _from_chunks(out_c, L)
    p_glob = None
    if n_g:
        sg = np.matmul(q[:, :n_g], np.swapaxes(k, 1, 2)) * scale
        if rpb is not None:
            sg[:, :, :n_g] += rpb.global_bias[:, G2G, None, None]
            sg[:, :, n_g:] += rpb.global_bias[:, G2L, None, None]
        p_glob = _masked_softmax(sg, True)
        out[:, :n_g] = np.matmul(p_glob, v)
    return out, ChunkCache(L, n_g, q, k, v, qc, kc, vc, p, p_glob, rpb)


def vil_chunk_backward(cache: ChunkCache, grad_out):
    """Return ``(dq, dk, dv, drpb)``; ``drpb`` is ``None`` without a bias table."""
    L, n_g = cache.layout, cache.n_g
    q, k, v = cache.q, cache.k, cache.v
    if grad_out.shape != q.shape:
        raise ValueError(f"grad shape {grad_out.shape} does not match output {q.shape}")
    scale = np.asarray(q.shape[-1] ** -0.5, q.dtype)
    p = cache.p_loc
    knb = _gather(cache.kc, L)
    vnb = _gather(cache.vc, L)
    go = _to_chunks(grad_out[:, n_g:], L)
    kg, vg = k[:, :n_g], v[:, :n_g]

    dp_loc = np.matmul(go, np.swapaxes(vnb, -1, -2))
    if n_g:
        dp = np.concatenate([np.matmul(go, np.swapaxes(vg, 1, 2)[:, None, None]), dp_loc], axis=-1)
    else:
        dp = dp_loc
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds_g, ds_l = ds[..., :n_g], ds[..., n_g:]

    dqc = np.matmul(ds_l, knb) * scale
    dknb = np.matmul(np.swapaxes(ds_l, -1, -2), cache.qc) * scale
    dvnb = np.matmul(np.swapaxes(p[..., n_g:], -1, -2), go)

    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dk[:, n_g:] = _from_chunks(_scatter(dknb, L), L)
    dv[:, n_g:] = _from_chunks(_scatter(dvnb, L), L)

    if n_g:
        dqc += np.matmul(ds_g, kg[:, None, None]) * scale
        dk[:, :n_g] += np.einsum("hyxqg,hyxqd->hgd", ds_g, cache.qc) * scale
        dv[:, :n_g] += np.einsum("hyxqg,hyxqd->hgd", p[..., :n_g], go)
        pg = cache.p_glob
        go_g = grad_out[:, :n_g]
        dv += np.matmul(np.swapaxes(pg, 1, 2), go_g)
        dpg = np.matmul(go_g, np.swapaxes(v, 1, 2))
        dsg = pg * (dpg - (dpg * pg).sum(axis=-1, keepdims=True))
        dq[:, :n_g] = np.matmul(dsg, k) * scale
        dk += np.matmul(np.swapaxes(dsg, 1, 2), q[:, :n_g]) * scale
    dq[:, n_g:] = _from_chunks(dqc, L)

    drpb = None
    rpb = cache.rpb
    if rpb is not None:
        r = rpb.dmax - 1
        g_off = ds_l.sum(axis=(1, 2))  # (h, c*c, S*c*c)
        inside = (np.abs(L.dy) <= r) & (np.abs(L.dx) <= r)
        side = 2 * r + 1
        flat = (L.dy[inside] + r) * side + (L.dx[inside] + r)
        idx = (np.arange(rpb.heads)[:, None] * side * side + flat).ravel()
        table = np.bincount(idx, g_off[:, inside].ravel(), minlength=rpb.heads * side * side)
        table = table.reshape(rpb.table.shape).astype(rpb.table.dtype)
        gb = np.zeros_like(rpb.global_bias)
        if n_g:
            gb[:, L2G] = ds_g.sum(axis=(1, 2, 3, 4))
            gb[:, G2G] = dsg[:, :, :n_g].sum(axis=(1, 2))
            gb[:, G2L] = dsg[:, :, n_g:].sum(axis=(1, 2))
        drpb = RpbTable(table, gb)
    return dq, dk, dv, drpb
