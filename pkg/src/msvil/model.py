"""Multi-scale stacked E-ViT: patch embedding, FFN, stages, heads, parameter counts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention.mechanisms import grid_to_patches, msa_forward, patches_to_grid
from .attention.spec import Kind, MsaParams, init_msa_params
from .configs import ModelConfig, StageConfig
from .posenc import Ape2d, ape_apply
from .tensor import (DEFAULT_DTYPE, gelu, gelu_backward, layer_norm, layer_norm_backward,
                     linear, linear_backward, make_rng, trunc_normal_init)

FFN_RATIO = 4
INIT_STD = 0.02


@dataclass
class FfnParams:
    ln_g: np.ndarray
    ln_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d, rng, std=INIT_STD, dtype=DEFAULT_DTYPE):
        hid = FFN_RATIO * d
        return cls(np.ones(d, dtype), np.zeros(d, dtype),
                   trunc_normal_init((d, hid), std, rng, dtype), np.zeros(hid, dtype),
                   trunc_normal_init((hid, d), std, rng, dtype), np.zeros(d, dtype))

    def named(self) -> dict[str, np.ndarray]:
        return dict(vars(self))


@dataclass
class BlockParams:
    attn: MsaParams
    ffn: FfnParams


@dataclass
class StageParams:
    embed_w: np.ndarray  # (p*p*c_in, d)
    embed_b: np.ndarray
    embed_ln_g: np.ndarray
    embed_ln_b: np.ndarray
    globals_: np.ndarray  # (n_g, d)
    blocks: list[BlockParams] = field(default_factory=list)
    ape: Ape2d | None = None

    def named(self) -> dict[str, np.ndarray]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b,
               "embed.ln_g": self.embed_ln_g, "embed.ln_b": self.embed_ln_b,
               "globals": self.globals_}
        if self.ape is not None:
            out.update({f"ape.{k}": v for k, v in self.ape.params().items()})
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.attn.{k}": v for k, v in blk.attn.named().items()})
            out.update({f"blocks.{i}.ffn.{k}": v for k, v in blk.ffn.named().items()})
        return out


# --- building blocks ---------------------------------------------------------

def patch_embed(image, p, w, b, ln_g, ln_b):
    """Non-overlapping ``p x p`` patches of an ``(H, W, c)`` map, projected to ``d`` and LayerNormed.

    Returns ``(tokens, cache)`` with tokens in row-major patch order.
    """
    H, W, _ = image.shape
    if H % p or W % p:
        raise ValueError(f"input {H}x{W} is not divisible by patch size {p}")
    patches = grid_to_patches(image, p)
    z = linear(patches, w, b)
    out = layer_norm(z, ln_g, ln_b)
    return out, {"patches": patches, "z": z, "shape": image.shape, "p": p}


def patch_embed_backward(cache, w, ln_g, grad):
    """Return ``(d_image, grads)`` with grads keyed w, b, ln_g, ln_b."""
    dz, dg, db_ln = layer_norm_backward(cache["z"], ln_g, grad)
    dpatch, dw, db = linear_backward(cache["patches"], w, dz)
    H, W, _ = cache["shape"]
    dimg = patches_to_grid(dpatch, H, W, cache["p"])
    return dimg, {"w": dw, "b": db, "ln_g": dg, "ln_b": db_ln}


def ffn_forward(tokens, params: FfnParams):
    """``tokens + W2 GELU(W1 LN(tokens))``."""
    y = layer_norm(tokens, params.ln_g, params.ln_b)
    a = linear(y, params.w1, params.b1)
    g = gelu(a)
    out = tokens + linear(g, params.w2, params.b2)
    return out, {"x": tokens, "y": y, "a": a, "g": g}


def ffn_backward(cache, params: FfnParams, grad):
    grads = {}
    dg, grads["w2"], grads["b2"] = linear_backward(cache["g"], params.w2, grad)
    da = gelu_backward(cache["a"], dg)
    dy, grads["w1"], grads["b1"] = linear_backward(cache["y"], params.w1, da)
    dx, grads["ln_g"], grads["ln_b"] = layer_norm_backward(cache["x"], params.ln_g, dy)
    return dx + grad, grads


# --- model -------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    resolution: tuple[int, int]
    stages: list[StageParams]
    norm_g: np.ndarray
    norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, resolution=224, seed=0, dtype=DEFAULT_DTYPE) -> "Model":
        """Deterministic init: trunc-normal(0.02) weights, zero biases, unit LN, zero classifier.

        ``resolution`` fixes the grid-bound parameters (APE tables, Linformer
        projections); RPB tables depend only on the window.
        """
        rng = make_rng(seed)
        res = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
        grids = config.grids(res)
        c_in = config.in_chans
        stages = []
        for st, grid in zip(config.stages, grids):
            stages.append(_init_stage(st, c_in, grid, config.pos_mode, rng, dtype))
            c_in = st.d
        d = config.stages[-1].d
        return cls(config, res, stages, np.ones(d, dtype), np.zeros(d, dtype),
                   np.zeros((d, config.num_classes), dtype), np.zeros(config.num_classes, dtype))

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, sp in enumerate(self.stages):
            out.update({f"stages.{i}.{k}": v for k, v in sp.named().items()})
        out.update({"norm.g": self.norm_g, "norm.b": self.norm_b,
                    "head.w": self.head_w, "head.b": self.head_b})
        return out

    def num_params(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def load_state(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.named_parameters()
        if strict:
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            if missing or extra:
                raise KeyError(f"weight mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in tensors.items():
            if name not in own:
                continue
            if own[name].shape != value.shape:
                raise ValueError(f"{name}: expected shape {own[name].shape}, got {value.shape}")
            np.copyto(own[name], value)


def _init_stage(st: StageConfig, c_in, grid, pos_mode, rng, dtype) -> StageParams:
    d = st.d
    sp = StageParams(
        embed_w=trunc_normal_init((st.p * st.p * c_in, d), INIT_STD, rng, dtype),
        embed_b=np.zeros(d, dtype),
        embed_ln_g=np.ones(d, dtype),
        embed_ln_b=np.zeros(d, dtype),
        globals_=trunc_normal_init((st.n_g, d), INIT_STD, rng, dtype),
    )
    use_rpb = pos_mode == "rpb"
    if use_rpb and st.attention not in (Kind.FULL, Kind.VIL, Kind.GLOBAL):
        raise ValueError(f"RPB is not defined for {st.attention.value} attention; use pos_mode=ape")
    if not use_rpb:
        sp.ape = Ape2d.init(grid[0], grid[1], d, st.n_g, rng, INIT_STD, dtype)
    spec = st.spec()
    for _ in range(st.n):
        sp.blocks.append(BlockParams(init_msa_params(spec, rng, grid, use_rpb, INIT_STD, dtype),
                                     FfnParams.init(d, rng, INIT_STD, dtype)))
    return sp


def stage_forward(fmap, st: StageConfig, params: StageParams, impl="chunk"):
    """Run one E-ViT stage on an ``(H, W, c)`` map; returns ``(local map, globals)``."""
    tokens, _ = patch_embed(fmap, st.p, params.embed_w, params.embed_b, params.embed_ln_g,
                            params.embed_ln_b)
    H, W = fmap.shape[0] // st.p, fmap.shape[1] // st.p
    x = np.concatenate([params.globals_.astype(tokens.dtype), tokens], axis=0)
    if params.ape is not None:
        x = ape_apply(x, params.ape, H, W)
    spec = st.spec()
    for blk in params.blocks:
        x, _ = msa_forward(x, blk.attn, spec, (H, W), impl=impl)
        x, _ = ffn_forward(x, blk.ffn)
    return x[st.n_g:].reshape(H, W, st.d), x[:st.n_g]


def forward_features(image, model: Model, impl="chunk"):
    """Final ``(H, W, d)`` local map and the last stage's global tokens."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != model.config.in_chans:
        raise ValueError(f"expected an (H, W, {model.config.in_chans}) image, got {image.shape}")
    x = image.astype(model.head_w.dtype, copy=False)
    globals_ = None
    for st, sp in zip(model.config.stages, model.stages):
        x, globals_ = stage_forward(x, st, sp, impl)  # globals are dropped between stages
    return x, globals_


def model_forward(image, model: Model, head_mode: str | None = None, impl="chunk"):
    """Return ``(logits, features)``; ``features`` is the final local map ``(H, W, d)``."""
    fmap, globals_ = forward_features(image, model, impl)
    mode = head_mode or model.config.head_mode
    if mode == "avgpool":
        pooled = layer_norm(fmap.reshape(-1, fmap.shape[-1]), model.norm_g, model.norm_b).mean(axis=0)
    elif mode == "cls":
        if globals_.shape[0] < 1:
            raise ValueError("CLS head needs a global token in the last stage")
        pooled = layer_norm(globals_[0], model.norm_g, model.norm_b)
    else:
        raise ValueError(f"unknown head mode {mode!r}")
    return linear(pooled[None], model.head_w, model.head_b)[0], fmap


# --- parameter accounting ----------------------------------------------------

def _attn_params(st: StageConfig, grid, use_rpb: bool) -> tuple[int, int, int]:
    """(projection params incl. pre-LN, mechanism extras, RPB params) for one block."""
    d = st.d
    proj = 4 * d * d + 4 * d + 2 * d
    extra = 0
    if st.attention is Kind.LINFORMER:
        extra = st.proj_dim * grid[0] * grid[1]
    elif st.attention is Kind.SRA and st.sr_ratio > 1:
        extra = st.sr_ratio ** 2 * d * d + d + 2 * d
    elif st.attention is Kind.PERFORMER:
        extra = st.n_features * (d // st.h)
    rpb = 0
    if use_rpb:
        dmax = 2 * ((st.window + 1) // 2) if st.attention is Kind.VIL else max(grid)
        rpb = st.h * ((2 * dmax - 1) ** 2 + 3)
    return proj, extra, rpb


def param_breakdown(config: ModelConfig, resolution=224, num_classes=None, pos_mode=None):
    """Rows ``(stage, component, count)``; stage is 1-based, ``None`` for the head."""
    num_classes = config.num_classes if num_classes is None else num_classes
    pos_mode = pos_mode or config.pos_mode
    rows = []
    c_in = config.in_chans
    for i, (st, grid) in enumerate(zip(config.stages, config.grids(resolution)), 1):
        d = st.d
        rows.append((i, "patch_embed", st.p * st.p * c_in * d + d + 2 * d))
        pos = st.n_g * d
        if pos_mode == "ape":
            pos += (grid[0] + grid[1]) * (d // 2) + st.n_g * d
        proj, extra, rpb = _attn_params(st, grid, pos_mode == "rpb")
        rows.append((i, "pos", pos + st.n * rpb))
        rows.append((i, "qkv_proj", st.n * proj))
        rows.append((i, "attention", st.n * extra))
        rows.append((i, "ffn", st.n * (2 * FFN_RATIO * d * d + FFN_RATIO * d + d + 2 * d)))
        c_in = d
    d = config.stages[-1].d
    rows.append((None, "head", 2 * d + d * num_classes + num_classes))
    return rows


def param_count(config: ModelConfig, num_classes=None, pos_mode=None, resolution=224) -> int:
    """Exact number of scalars in ``Model.init(config, resolution)``.

    Includes the Performer feature matrices, which are buffers rather than
    trained weights.
    """
    return int(sum(r[2] for r in param_breakdown(config, resolution, num_classes, pos_mode)))
