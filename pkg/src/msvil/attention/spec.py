from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..posenc import RpbTable
from ..tensor import DEFAULT_DTYPE, trunc_normal_init


class Kind(str, Enum):
    FULL = "full"
    VIL = "vil"
    GLOBAL = "global"
    LINFORMER = "linformer"
    SRA = "sra"
    PERFORMER = "performer"


class MaskingMode(str, Enum):
    EXACT = "exact"
    NOPAD = "nopad"
    CYCLIC = "cyclic"


@dataclass(frozen=True)
class AttentionSpec:
    """Mechanism choice plus its hyperparameters.

    Only the fields relevant to ``kind`` are read: ``window``/``masking``/``shift``
    for ViL, ``proj_dim`` for Linformer, ``sr_ratio`` for SRA and
    ``n_features`` for Performer.
    """

    kind: Kind = Kind.VIL
    heads: int = 1
    dim: int = 64
    n_g: int = 1
    window: int = 15
    masking: MaskingMode = MaskingMode.NOPAD
    shift: int = 0
    proj_dim: int = 256
    sr_ratio: int = 1
    n_features: int = 256

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "masking", MaskingMode(self.masking))
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.n_g < 0:
            raise ValueError("n_g must be >= 0")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 1, got {self.window}")
        if not -1 <= self.shift <= 8:
            raise ValueError(f"shift mode must be in [-1, 8], got {self.shift}")
        if self.shift != 0 and self.kind is not Kind.VIL:
            raise ValueError("shift modes only apply to sliding-chunk ViL attention")
        if self.proj_dim < 1 or self.sr_ratio < 1 or self.n_features < 1:
            raise ValueError("proj_dim, sr_ratio and n_features must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def chunk(self) -> int:
        return (self.window + 1) // 2

    @property
    def rpb_dmax(self) -> int:
        """Table extent that covers every offset inside a 3x3 chunk neighbourhood."""
        return 2 * self.chunk


@dataclass
class MsaParams:
    """Pre-norm, shared Q/K/V/O projections and mechanism extras for one MSA block.

    Weights are stored ``(d_in, d_out)`` so a projection is ``x @ w + b``.
    """

    ln_g: np.ndarray
    ln_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    proj: np.ndarray | None = None  # Linformer, (K, n_l)
    sr_w: np.ndarray | None = None  # SRA, (R, R, d, d)
    sr_b: np.ndarray | None = None
    sr_ln_g: np.ndarray | None = None
    sr_ln_b: np.ndarray | None = None
    omega: np.ndarray | None = None  # Performer, (m, d_h); a buffer, not trained
    rpb: RpbTable | None = field(default=None)

    def trainable(self) -> dict[str, np.ndarray]:
        out = {
            k: getattr(self, k)
            for k in ("ln_g", "ln_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                      "proj", "sr_w", "sr_b", "sr_ln_g", "sr_ln_b")
            if getattr(self, k) is not None
        }
        if self.rpb is not None:
            out["rpb_table"] = self.rpb.table
            out["rpb_global"] = self.rpb.global_bias
        return out

    def named(self) -> dict[str, np.ndarray]:
        out = self.trainable()
        if self.omega is not None:
            out["omega"] = self.omega
        return out

    def astype(self, dtype) -> "MsaParams":
        def cast(a):
            return None if a is None else a.astype(dtype)

        kw = {k: cast(v) for k, v in vars(self).items() if k != "rpb"}
        rpb = None if self.rpb is None else RpbTable(cast(self.rpb.table), cast(self.rpb.global_bias))
        return MsaParams(**kw, rpb=rpb)


def orthogonal_features(m: int, dim: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """``(m, dim)`` Gaussian rows, orthogonal within each block of ``dim`` rows.

    Row norms are resampled from the chi distribution so each row is marginally
    N(0, I).
    """
    blocks = []
    remaining = m
    while remaining > 0:
        g = rng.standard_normal((dim, dim))
        q, _ = np.linalg.qr(g)
        take = min(dim, remaining)
        blocks.append(q.T[:take])
        remaining -= take
    w = np.concatenate(blocks, axis=0)
    norms = np.linalg.norm(rng.standard_normal((m, dim)), axis=1)
    return (w * norms[:, None]).astype(dtype)


def init_msa_params(spec: AttentionSpec, rng: np.random.Generator, grid=None, rpb=False,
                    std=0.02, dtype=DEFAULT_DTYPE) -> MsaParams:
    d = spec.dim
    p = MsaParams(
        ln_g=np.ones(d, dtype), ln_b=np.zeros(d, dtype),
        wq=trunc_normal_init((d, d), std, rng, dtype), bq=np.zeros(d, dtype),
        wk=trunc_normal_init((d, d), std, rng, dtype), bk=np.zeros(d, dtype),
        wv=trunc_normal_init((d, d), std, rng, dtype), bv=np.zeros(d, dtype),
        wo=trunc_normal_init((d, d), std, rng, dtype), bo=np.zeros(d, dtype),
    )
    if spec.kind is Kind.LINFORMER:
        if grid is None:
            raise ValueError("Linformer parameters are bound to a grid size")
        n_l = grid[0] * grid[1]
        p.proj = trunc_normal_init((spec.proj_dim, n_l), 1.0 / np.sqrt(n_l), rng, dtype)
    elif spec.kind is Kind.SRA and spec.sr_ratio > 1:
        R = spec.sr_ratio
        p.sr_w = trunc_normal_init((R, R, d, d), std, rng, dtype)
        p.sr_b = np.zeros(d, dtype)
        p.sr_ln_g = np.ones(d, dtype)
        p.sr_ln_b = np.zeros(d, dtype)
    elif spec.kind is Kind.PERFORMER:
        p.omega = orthogonal_features(spec.n_features, spec.head_dim, rng, dtype)
    if rpb:
        if spec.kind not in (Kind.FULL, Kind.VIL, Kind.GLOBAL):
            raise ValueError(f"relative positional bias is not defined for {spec.kind.value} attention")
        if spec.kind is Kind.VIL:
            dmax = spec.rpb_dmax
        else:
            if grid is None:
                raise ValueError("full/global RPB needs the grid size")
            dmax = max(grid)
        p.rpb = RpbTable.init(spec.heads, dmax, rng, std, dtype)
    return p
