"""Absolute 2-D positional embeddings and relative positional bias tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, bilinear_resize, trunc_normal_init

# column order of RpbTable.global_bias
G2L, L2G, G2G = 0, 1, 2


@dataclass
class Ape2d:
    """Separate y and x tables, each ``d/2`` wide, plus one row per global token."""

    y_table: np.ndarray
    x_table: np.ndarray
    global_table: np.ndarray

    @classmethod
    def init(cls, h_max, w_max, d, n_g, rng, std=0.02, dtype=DEFAULT_DTYPE):
        if d % 2:
            raise ValueError(f"APE needs an even hidden dim, got {d}")
        return cls(
            y_table=trunc_normal_init((h_max, d // 2), std, rng, dtype),
            x_table=trunc_normal_init((w_max, d // 2), std, rng, dtype),
            global_table=trunc_normal_init((n_g, d), std, rng, dtype),
        )

    @property
    def dim(self) -> int:
        return self.global_table.shape[1]

    def grid_embedding(self, H, W) -> np.ndarray:
        """``(H*W, d)`` embedding of the local tokens in row-major order."""
        if H > self.y_table.shape[0] or W > self.x_table.shape[0]:
            raise ValueError(
                f"grid {H}x{W} exceeds APE table {self.y_table.shape[0]}x{self.x_table.shape[0]}"
            )
        half = self.y_table.shape[1]
        emb = np.empty((H, W, 2 * half), dtype=self.y_table.dtype)
        emb[:, :, :half] = self.y_table[:H, None, :]
        emb[:, :, half:] = self.x_table[None, :W, :]
        return emb.reshape(H * W, 2 * half)

    def params(self) -> dict[str, np.ndarray]:
        return {"y_table": self.y_table, "x_table": self.x_table, "global_table": self.global_table}


def ape_apply(tokens: np.ndarray, ape: Ape2d, H: int, W: int) -> np.ndarray:
    n_g = ape.global_table.shape[0]
    if tokens.shape[0] != n_g + H * W:
        raise ShapeError(f"expected {n_g} + {H}*{W} tokens, got {tokens.shape[0]}")
    pos = np.concatenate([ape.global_table, ape.grid_embedding(H, W)], axis=0)
    return tokens + pos


@dataclass
class RpbTable:
    """Per-head bias indexed by 2-D offset in ``[-(dmax-1), dmax-1]`` per axis.

    ``global_bias[:, G2L | L2G | G2G]`` holds one scalar per head for pairs that
    involve a global token.
    """

    table: np.ndarray
    global_bias: np.ndarray

    @classmethod
    def init(cls, heads, dmax, rng, std=0.02, dtype=DEFAULT_DTYPE):
        side = 2 * dmax - 1
        return cls(
            table=trunc_normal_init((heads, side, side), std, rng, dtype),
            global_bias=trunc_normal_init((heads, 3), std, rng, dtype),
        )

    @classmethod
    def zeros(cls, heads, dmax, dtype=DEFAULT_DTYPE):
        side = 2 * dmax - 1
        return cls(np.zeros((heads, side, side), dtype), np.zeros((heads, 3), dtype))

    @property
    def heads(self) -> int:
        return self.table.shape[0]

    @property
    def dmax(self) -> int:
        return (self.table.shape[1] + 1) // 2

    def lookup(self, dy, dx) -> np.ndarray:
        """Bias for offsets ``(dy, dx)`` (key minus query); shape ``(heads, *dy.shape)``."""
        dy = np.asarray(dy)
        dx = np.asarray(dx)
        r = self.dmax - 1
        if np.any(np.abs(dy) > r) or np.any(np.abs(dx) > r):
            raise ValueError(f"offset outside RPB range +-{r}")
        return self.table[:, dy + r, dx + r]

    def params(self) -> dict[str, np.ndarray]:
        return {"table": self.table, "global_bias": self.global_bias}


def grid_offsets(H, W):
    """Key-minus-query offsets ``(dy, dx)`` for every local pair, each ``(H*W, H*W)``."""
    yy, xx = np.divmod(np.arange(H * W), W)
    return yy[None, :] - yy[:, None], xx[None, :] - xx[:, None]


def rpb_bias_matrix(rpb: RpbTable, H, W, n_g, mask=None, offsets=None) -> np.ndarray:
    """Dense ``(heads, N, N)`` bias for ``N = n_g + H*W`` tokens, globals first.

    ``offsets`` overrides the plain key-minus-query displacement (cyclic chunk
    layouts wrap around). Masked-out local pairs may lie outside the table and
    receive 0.
    """
    n_l = H * W
    N = n_g + n_l
    dy, dx = grid_offsets(H, W) if offsets is None else offsets
    r = rpb.dmax - 1
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if mask is not None:
        need = np.asarray(mask)[n_g:, n_g:]
    else:
        need = np.ones((n_l, n_l), dtype=bool)
    bad = need & ~inside
    if bad.any():
        q, k = np.argwhere(bad)[0]
        raise ValueError(
            f"attended pair ({q}, {k}) has offset ({dy[q, k]}, {dx[q, k]}) outside RPB range +-{r}"
        )
    h = rpb.heads
    out = np.empty((h, N, N), dtype=rpb.table.dtype)
    local = rpb.table[:, np.clip(dy, -r, r) + r, np.clip(dx, -r, r) + r]
    out[:, n_g:, n_g:] = np.where(inside, local, 0)
    gb = rpb.global_bias
    out[:, :n_g, n_g:] = gb[:, G2L, None, None]
    out[:, n_g:, :n_g] = gb[:, L2G, None, None]
    out[:, :n_g, :n_g] = gb[:, G2G, None, None]
    return out


def rpb_bias_backward(rpb: RpbTable, H, W, n_g, grad_bias, offsets=None) -> RpbTable:
    """Scatter a ``(heads, N, N)`` bias gradient back onto the table entries."""
    dy, dx = grid_offsets(H, W) if offsets is None else offsets
    r = rpb.dmax - 1
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    g_table = np.zeros_like(rpb.table)
    g_loc = grad_bias[:, n_g:, n_g:]
    iy = (dy[inside] + r)
    ix = (dx[inside] + r)
    for head in range(rpb.heads):
        np.add.at(g_table[head], (iy, ix), g_loc[head][inside])
    g_glob = np.stack(
        [
            grad_bias[:, :n_g, n_g:].sum(axis=(1, 2)),
            grad_bias[:, n_g:, :n_g].sum(axis=(1, 2)),
            grad_bias[:, :n_g, :n_g].sum(axis=(1, 2)),
        ],
        axis=1,
    ).astype(rpb.global_bias.dtype)
    return RpbTable(g_table, g_glob)


def rpb_resize(rpb: RpbTable, new_dmax: int) -> RpbTable:
    """Bilinearly resize every head's table to cover ``new_dmax``; global scalars are copied."""
    if new_dmax < 1:
        raise ValueError("new_dmax must be >= 1")
    side = 2 * new_dmax - 1
    grid = np.transpose(rpb.table, (1, 2, 0))
    resized = bilinear_resize(grid, side, side)
    return RpbTable(np.ascontiguousarray(np.transpose(resized, (2, 0, 1))), rpb.global_bias.copy())
