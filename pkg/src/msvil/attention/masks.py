"""Boolean attention masks over ``n_g + n_l`` tokens (globals first, locals row-major).

These are built by direct enumeration and serve as the reference layouts the
sliding-chunk kernel is checked against.
"""

from __future__ import annotations

import numpy as np

from .spec import MaskingMode

# Neighbour chunk order for shift modes 1..8: row-major 3x3 without the centre.
NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def active_slots(shift: int):
    """Chunk offsets a query chunk may look at, in priority order (own chunk first)."""
    if shift == 0:
        return ((0, 0),) + NEIGHBORS
    if shift == -1:
        return ((0, 0),)
    return ((0, 0), NEIGHBORS[shift - 1])


def _chunk_table(H, W, window, masking, shift):
    """Map (query chunk, key chunk) -> chunk offset (sy, sx) of the slot that admits it."""
    c = (window + 1) // 2
    ncy, ncx = -(-H // c), -(-W // c)
    cyclic = MaskingMode(masking) is MaskingMode.CYCLIC
    table = {}
    for cy in range(ncy):
        for cx in range(ncx):
            for sy, sx in active_slots(shift):
                ty, tx = cy + sy, cx + sx
                if cyclic:
                    ty, tx = ty % ncy, tx % ncx
                elif not (0 <= ty < ncy and 0 <= tx < ncx):
                    continue
                table.setdefault(((cy, cx), (ty, tx)), (sy, sx))
    return c, table


def vil_local_layout(H, W, window, masking=MaskingMode.NOPAD, shift=0):
    """Local-to-local mask plus the relative offsets used for positional bias.

    Returns ``(mask, dy, dx)``, each ``(H*W, H*W)``. Offsets are key minus query,
    except that a key reached through a wrapped (cyclic) chunk is measured as if
    that chunk sat next to the query chunk.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if not -1 <= shift <= 8:
        raise ValueError(f"shift mode must be in [-1, 8], got {shift}")
    masking = MaskingMode(masking)
    c, table = _chunk_table(H, W, window, masking, shift)
    r = (window - 1) // 2
    ncy, ncx = -(-H // c), -(-W // c)
    nc = ncy * ncx
    admitted = np.zeros((nc, nc), dtype=bool)
    slot_y = np.zeros((nc, nc), dtype=np.int64)
    slot_x = np.zeros((nc, nc), dtype=np.int64)
    for ((cy, cx), (ty, tx)), (sy, sx) in table.items():
        i, j = cy * ncx + cx, ty * ncx + tx
        admitted[i, j] = True
        slot_y[i, j] = sy
        slot_x[i, j] = sx
    ys, xs = np.divmod(np.arange(H * W), W)
    cid = (ys // c) * ncx + xs // c
    qc, kc = cid[:, None], cid[None, :]
    mask = admitted[qc, kc]
    dy = np.where(mask, slot_y[qc, kc] * c + (ys % c)[None, :] - (ys % c)[:, None],
                  ys[None, :] - ys[:, None])
    dx = np.where(mask, slot_x[qc, kc] * c + (xs % c)[None, :] - (xs % c)[:, None],
                  xs[None, :] - xs[:, None])
    if masking is MaskingMode.EXACT:
        mask &= (np.abs(dy) <= r) & (np.abs(dx) <= r)
    return mask, dy, dx


def with_globals(local_mask: np.ndarray, n_g: int) -> np.ndarray:
    n_l = local_mask.shape[0]
    mask = np.ones((n_g + n_l, n_g + n_l), dtype=bool)
    mask[n_g:, n_g:] = local_mask
    return mask


def build_vil_mask(H, W, n_g, window, masking=MaskingMode.NOPAD, shift=0) -> np.ndarray:
    """``(N, N)`` ViL mask: globals see and are seen by everything, locals see their chunk neighbourhood."""
    local, _, _ = vil_local_layout(H, W, window, masking, shift)
    return with_globals(local, n_g)


def build_global_mask(n_g: int, n_l: int) -> np.ndarray:
    """Global-memory mask: locals attend every global token and themselves only."""
    if n_g < 1:
        raise ValueError("global attention needs at least one global token")
    return with_globals(np.eye(n_l, dtype=bool), n_g)


def full_mask(N: int) -> np.ndarray:
    return np.ones((N, N), dtype=bool)
