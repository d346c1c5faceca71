"""Analytic attention-pair, FLOP and parameter accounting.

FLOPs count multiply-accumulates (one MAC = one FLOP); softmax, LayerNorm,
GELU and other elementwise work is excluded.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .attention.spec import AttentionSpec, Kind, MaskingMode
from .configs import ModelConfig
from .model import FFN_RATIO, param_breakdown

# 3x3 chunk neighbourhood offsets, own chunk first, then row-major around it
_SLOTS = [(0, 0), (-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _slots_for(shift: int):
    if shift == -1:
        return _SLOTS[:1]
    if shift == 0:
        return _SLOTS
    return [_SLOTS[0], _SLOTS[shift]]


def _axis_counts(L: int, c: int, r: int | None, s: int, cyclic: bool) -> np.ndarray:
    """Keys seen along one axis through slot offset ``s``: ``(n_chunks, c)`` per query row.

    Phantom query rows and off-grid slots (non-cyclic) count zero.
    """
    n = -(-L // c)
    ci = np.arange(n)[:, None, None]
    q = np.arange(c)[None, :, None]
    t = np.arange(c)[None, None, :]
    nj = ci + s
    if cyclic:
        nj = nj % n
    ok = (ci * c + q < L) & (nj * c + t < L) & (nj >= 0) & (nj < n)
    if r is not None:
        ok &= np.abs(s * c + t - q) <= r
    return ok.sum(axis=2)


@lru_cache(maxsize=4096)
def _axis_total(L: int, c: int, r: int | None, s: int, cyclic: bool) -> int:
    return int(_axis_counts(L, c, r, s, cyclic).sum())


def _admitted_slots(spec: AttentionSpec, ny: int, nx: int):
    """Slots in priority order, dropping ones that reach an already-admitted chunk.

    Only cyclic mode can alias two slots, and whether it does depends on the
    chunk grid size alone, not on the query chunk.
    """
    out, seen = [], set()
    for sy, sx in _slots_for(spec.shift):
        key = (sy % ny, sx % nx) if spec.masking is MaskingMode.CYCLIC else (sy, sx)
        if key not in seen:
            seen.add(key)
            out.append((sy, sx))
    return out


def _vil_local_pairs(spec: AttentionSpec, H: int, W: int) -> int:
    c = spec.chunk
    r = (spec.window - 1) // 2 if spec.masking is MaskingMode.EXACT else None
    cyclic = spec.masking is MaskingMode.CYCLIC
    total = 0
    # pairs of a (chunk, slot) factor into a y-count times an x-count
    for sy, sx in _admitted_slots(spec, -(-H // c), -(-W // c)):
        total += _axis_total(H, c, r, sy, cyclic) * _axis_total(W, c, r, sx, cyclic)
    return total


def attn_pairs(spec: AttentionSpec, H: int, W: int) -> int:
    """Number of attended (query, key) pairs for one head on an ``H x W`` grid plus ``n_g`` globals.

    Performer is reported in feature-space pairs ``m * N``.
    """
    n_g, n_l = spec.n_g, H * W
    N = n_g + n_l
    kind = spec.kind
    if kind is Kind.FULL:
        return N * N
    if kind is Kind.GLOBAL:
        return n_g * N + n_l * (n_g + 1)
    if kind is Kind.VIL:
        return n_g * N + n_l * n_g + _vil_local_pairs(spec, H, W)
    if kind is Kind.LINFORMER:
        return N * (spec.proj_dim + n_g)
    if kind is Kind.SRA:
        return N * (n_l // spec.sr_ratio ** 2 + n_g)
    if kind is Kind.PERFORMER:
        return spec.n_features * N
    raise ValueError(f"unknown attention kind {kind}")


def interior_pairs_per_token(spec: AttentionSpec) -> float:
    """Pairs per local query far from any border (globals included).

    Exact-window mode gives ``window**2 + n_g``; chunk modes see the whole
    chunk neighbourhood, ``(3 * chunk)**2 + n_g`` for shift mode 0.
    """
    if spec.kind is not Kind.VIL:
        raise ValueError("interior pair count is defined for ViL attention only")
    c = spec.chunk
    r = (spec.window - 1) // 2 if spec.masking is MaskingMode.EXACT else None
    L = 5 * c
    per_query = np.zeros((c, c))
    for sy, sx in _slots_for(spec.shift):
        ay = _axis_counts(L, c, r, sy, False)[2]
        per_query += np.outer(ay, _axis_counts(L, c, r, sx, False)[2])
    return float(per_query.mean()) + spec.n_g


def memory_theoretical(spec: AttentionSpec, H: int, W: int) -> int:
    """Storage proxy: attended pairs plus token activations ``(n_g + n_l) * d``.

    A proxy for comparing mechanisms, not a byte-accurate prediction.
    """
    return attn_pairs(spec, H, W) + (spec.n_g + H * W) * spec.dim


def block_flops(spec: AttentionSpec, H: int, W: int) -> dict[str, int]:
    """MACs of one attention + FFN block, split into qkv_proj / attention / ffn."""
    d, n_g, n_l = spec.dim, spec.n_g, H * W
    N = n_g + n_l
    kind = spec.kind
    if kind is Kind.SRA:
        R = spec.sr_ratio
        n_kv = n_g + n_l // (R * R)
        qkv = 2 * N * d * d + 2 * n_kv * d * d
        attn = 2 * N * n_kv * d + (n_l * d * d if R > 1 else 0)
    elif kind is Kind.PERFORMER:
        m = spec.n_features
        qkv = 4 * N * d * d
        attn = 4 * N * m * d + 2 * N * m * spec.heads
    else:
        qkv = 4 * N * d * d
        attn = 2 * attn_pairs(spec, H, W) * d
        if kind is Kind.LINFORMER:
            attn += 2 * spec.proj_dim * n_l * d
    return {"qkv_proj": qkv, "attention": attn, "ffn": 2 * FFN_RATIO * N * d * d}


@dataclass
class CostRow:
    component: str
    stage: int | None
    params: int
    flops: int
    attn_pairs: int


@dataclass
class CostReport:
    config: str
    resolution: tuple[int, int]
    breakdown: list[CostRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.breakdown)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.breakdown)

    @property
    def attn_pairs(self) -> int:
        return sum(r.attn_pairs for r in self.breakdown)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def stage_totals(self) -> list[tuple[int | None, int, int]]:
        """``(stage, params, flops)`` per stage in order, head last."""
        order, acc = [], {}
        for r in self.breakdown:
            if r.stage not in acc:
                order.append(r.stage)
                acc[r.stage] = [0, 0]
            acc[r.stage][0] += r.params
            acc[r.stage][1] += r.flops
        return [(s, *acc[s]) for s in order]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_HEADER)
        res = f"{self.resolution[0]}x{self.resolution[1]}"
        for r in self.breakdown:
            w.writerow([self.config, res, r.component, "" if r.stage is None else r.stage,
                        r.params, r.flops, r.attn_pairs])
        return buf.getvalue()


CSV_HEADER = ["config", "resolution", "component", "stage", "params", "flops", "attn_pairs"]


def flops_model(config: ModelConfig, resolution=224, num_classes=None) -> CostReport:
    res = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    grids = config.grids(res)
    params = {(s, comp): n for s, comp, n in param_breakdown(config, res, num_classes)}
    report = CostReport(config.name, res)
    c_in = config.in_chans
    for i, (st, (H, W)) in enumerate(zip(config.stages, grids), 1):
        spec = st.spec()
        blk = block_flops(spec, H, W)
        pairs = st.n * attn_pairs(spec, H, W)
        report.breakdown += [
            CostRow("patch_embed", i, params[(i, "patch_embed")], H * W * st.p * st.p * c_in * st.d, 0),
            CostRow("pos", i, params[(i, "pos")], 0, 0),
            CostRow("qkv_proj", i, params[(i, "qkv_proj")], st.n * blk["qkv_proj"], 0),
            CostRow("attention", i, params[(i, "attention")], st.n * blk["attention"], pairs),
            CostRow("ffn", i, params[(i, "ffn")], st.n * blk["ffn"], 0),
        ]
        c_in = st.d
    classes = config.num_classes if num_classes is None else num_classes
    report.breakdown.append(
        CostRow("head", None, params[(None, "head")], config.stages[-1].d * classes, 0))
    return report
