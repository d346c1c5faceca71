"""Oracle-equivalence and gradient suites shared by the ``check`` command and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .attention.chunk import vil_chunk_attend, vil_chunk_backward
from .attention.dense import attend_dense, attend_dense_backward
from .attention.masks import build_global_mask, vil_local_layout, with_globals
from .attention.mechanisms import msa_backward, msa_forward
from .attention.spec import AttentionSpec, Kind, MaskingMode, init_msa_params
from .model import FfnParams, ffn_backward, ffn_forward, patch_embed, patch_embed_backward
from .posenc import RpbTable, rpb_bias_matrix
from .tensor import layer_norm, layer_norm_backward, make_rng

MECHANISMS = tuple(k.value for k in Kind)
SHIFTS = tuple(range(-1, 9))
F32_TOL = 1e-5
F64_TOL = 1e-9
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    mechanism: str
    test: str
    cases: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst < self.tol


def vil_kernel_sweep(grid_max=14, grid_min=2, windows=(1, 3, 5), n_gs=(0, 1, 2),
                     maskings=tuple(MaskingMode), shifts=SHIFTS, seed=0, dtype=np.float32,
                     heads=2, head_dim=4):
    """Sliding-chunk forward/backward against masked-dense attention on every listed geometry.

    Returns ``(cases, worst)`` where ``worst`` maps out/dq/dk/dv to the largest
    absolute difference seen. RPB is on throughout, drawn wide (std 0.5) so
    that a wrong offset shows up.
    """
    rng = make_rng(seed)
    worst = {"out": 0.0, "dq": 0.0, "dk": 0.0, "dv": 0.0}
    cases = 0
    g_max = max(n_gs)
    for H in range(grid_min, grid_max + 1):
        for W in range(grid_min, grid_max + 1):
            for window in windows:
                c = (window + 1) // 2
                for masking in maskings:
                    for shift in shifts:
                        local, dy, dx = vil_local_layout(H, W, window, masking, shift)
                        rpb = RpbTable.init(heads, 2 * c, rng, std=0.5, dtype=dtype)
                        mask = with_globals(local, g_max)
                        bias = rpb_bias_matrix(rpb, H, W, g_max, mask, (dy, dx))
                        full = [rng.standard_normal((heads, g_max + H * W, head_dim)).astype(dtype)
                                for _ in range(4)]
                        # fewer globals = drop leading rows of the same reference problem
                        for n_g in n_gs:
                            o = g_max - n_g
                            q, k, v, g = (t[:, o:] for t in full)
                            out, cache = vil_chunk_attend(q, k, v, H, W, n_g, window, masking,
                                                          shift, rpb)
                            dq, dk, dv, _ = vil_chunk_backward(cache, g)
                            ref, probs = attend_dense(q, k, v, bias[:, o:, o:], mask[o:, o:],
                                                      return_probs=True)
                            rq, rk, rv, _ = attend_dense_backward(q, k, v, probs, g)
                            for name, a, b in (("out", out, ref), ("dq", dq, rq),
                                               ("dk", dk, rk), ("dv", dv, rv)):
                                worst[name] = max(worst[name], float(np.abs(a - b).max()))
                            cases += 1
    return cases, worst


def _random_params(spec, rng, grid, rpb, dtype, std=0.5):
    p = init_msa_params(spec, rng, grid=grid, rpb=rpb, std=std, dtype=dtype)
    for v in p.trainable().values():
        v += (0.1 * rng.standard_normal(v.shape)).astype(dtype)
    return p


def _small_spec(mech: str, rng, grid_max: int, dim=8, heads=2):
    """A random small geometry for ``mech`` whose grid fits in ``grid_max``."""
    kind = Kind(mech)
    if kind is Kind.SRA:
        R = int(rng.integers(1, 3))
        hi = max(1, grid_max // R)
        grid = (R * int(rng.integers(1, hi + 1)), R * int(rng.integers(1, hi + 1)))
    else:
        grid = (int(rng.integers(2, grid_max + 1)), int(rng.integers(2, grid_max + 1)))
    kw = {}
    n_g = int(rng.integers(0, 3))
    if kind is Kind.VIL:
        kw = dict(window=int(rng.choice([1, 3, 5])), masking=MaskingMode(rng.choice(["exact", "nopad", "cyclic"])),
                  shift=int(rng.integers(-1, 9)))
    elif kind is Kind.GLOBAL:
        n_g = int(rng.integers(1, 3))
    elif kind is Kind.LINFORMER:
        kw = dict(proj_dim=int(rng.integers(2, 9)))
    elif kind is Kind.SRA:
        kw = dict(sr_ratio=R)
    elif kind is Kind.PERFORMER:
        kw = dict(n_features=64)
    return AttentionSpec(kind=kind, heads=heads, dim=dim, n_g=n_g, **kw), grid


def _reference(spec, params, x, grid):
    h, n_g = spec.heads, spec.n_g
    kind = spec.kind
    if kind is Kind.LINFORMER:
        return oracle.linformer_reference(x, params, h, n_g)
    if kind is Kind.SRA:
        return oracle.sra_reference(x, params, h, n_g, grid[0], grid[1], spec.sr_ratio)
    if kind is Kind.PERFORMER:
        return oracle.performer_reference(x, params, h)
    H, W = grid
    mask = None
    offsets = None
    if kind is Kind.VIL:
        local, dy, dx = vil_local_layout(H, W, spec.window, spec.masking, spec.shift)
        mask, offsets = with_globals(local, n_g), (dy, dx)
    elif kind is Kind.GLOBAL:
        mask = build_global_mask(n_g, H * W)
    bias = None if params.rpb is None else rpb_bias_matrix(params.rpb, H, W, n_g, mask, offsets)
    return oracle.masked_dense_reference(x, params, h, mask, bias)


def msa_equivalence(mech: str, grid_max=8, cases=12, seed=0, dtype=np.float32) -> CheckResult:
    """Full MSA block (LN, projections, residual) against the brute-force oracle."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(cases):
        spec, grid = _small_spec(mech, rng, grid_max)
        rpb = spec.kind in (Kind.FULL, Kind.VIL, Kind.GLOBAL)
        params = _random_params(spec, rng, grid, rpb, dtype, std=0.2)
        x = rng.standard_normal((spec.n_g + grid[0] * grid[1], spec.dim)).astype(dtype)
        out, _ = msa_forward(x, params, spec, grid)
        ref = _reference(spec, params.astype(np.float64), x.astype(np.float64), grid)
        worst = max(worst, float(np.abs(out - ref).max()))
    tol = F32_TOL if dtype == np.float32 else F64_TOL
    return CheckResult(mech, "forward-vs-oracle", cases, worst, tol)


def msa_gradcheck(mech: str, seed=0, cases=2) -> CheckResult:
    """Central differences (f64, h=1e-5) against ``msa_backward`` for tokens and all trainables."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(cases):
        spec, grid = _small_spec(mech, rng, 4)
        rpb = spec.kind in (Kind.FULL, Kind.VIL, Kind.GLOBAL)
        params = _random_params(spec, rng, grid, rpb, np.float64)
        N = spec.n_g + grid[0] * grid[1]
        x = rng.standard_normal((N, spec.dim))
        G = rng.standard_normal((N, spec.dim))
        out, cache = msa_forward(x, params, spec, grid)
        dx, grads = msa_backward(cache, params, spec, G)

        def f():
            return float((msa_forward(x, params, spec, grid)[0] * G).sum())

        rep = oracle.grad_check(f, {"x": x, **params.trainable()}, {"x": dx, **grads})
        worst = max(worst, rep.worst)
    return CheckResult(mech, "gradient", cases, worst, GRAD_TOL)


def primitive_gradchecks(seed=0) -> list[CheckResult]:
    """LayerNorm, FFN and patch embedding, f64."""
    rng = make_rng(seed)
    results = []

    x = rng.standard_normal((5, 6))
    g = 1 + 0.3 * rng.standard_normal(6)
    b = 0.3 * rng.standard_normal(6)
    G = rng.standard_normal((5, 6))
    dx, dg, db = layer_norm_backward(x, g, G)
    rep = oracle.grad_check(lambda: float((layer_norm(x, g, b) * G).sum()),
                            {"x": x, "g": g, "b": b}, {"x": dx, "g": dg, "b": db})
    results.append(CheckResult("layernorm", "gradient", 1, rep.worst, GRAD_TOL))

    ffn = FfnParams.init(6, rng, std=0.5, dtype=np.float64)
    for v in vars(ffn).values():
        v += 0.1 * rng.standard_normal(v.shape)
    _, cache = ffn_forward(x, ffn)
    dx, grads = ffn_backward(cache, ffn, G)
    rep = oracle.grad_check(lambda: float((ffn_forward(x, ffn)[0] * G).sum()),
                            {"x": x, **ffn.named()}, {"x": dx, **grads})
    results.append(CheckResult("ffn", "gradient", 1, rep.worst, GRAD_TOL))

    img = rng.standard_normal((4, 6, 2))
    w = 0.5 * rng.standard_normal((2 * 2 * 2, 6))
    eb = 0.1 * rng.standard_normal(6)
    lg = 1 + 0.1 * rng.standard_normal(6)
    lb = 0.1 * rng.standard_normal(6)
    G = rng.standard_normal((6, 6))
    _, cache = patch_embed(img, 2, w, eb, lg, lb)
    dimg, grads = patch_embed_backward(cache, w, lg, G)
    rep = oracle.grad_check(lambda: float((patch_embed(img, 2, w, eb, lg, lb)[0] * G).sum()),
                            {"image": img, "w": w, "b": eb, "ln_g": lg, "ln_b": lb},
                            {"image": dimg, **grads})
    results.append(CheckResult("patch_embed", "gradient", 1, rep.worst, GRAD_TOL))
    return results


def run_suite(mechanisms=MECHANISMS, grid_max=8, seed=0, f64=False) -> list[CheckResult]:
    dtype = np.float64 if f64 else np.float32
    tol = F64_TOL if f64 else F32_TOL
    results = []
    for mech in mechanisms:
        if mech == "vil":
            cases, worst = vil_kernel_sweep(grid_max=grid_max, seed=seed, dtype=dtype)
            results.append(CheckResult("vil", "chunk-vs-dense fwd+bwd", cases, max(worst.values()), tol))
        results.append(msa_equivalence(mech, grid_max, seed=seed, dtype=dtype))
        results.append(msa_gradcheck(mech, seed=seed))
    if set(mechanisms) == set(MECHANISMS):
        results.extend(primitive_gradchecks(seed))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'mechanism':<12} {'test':<24} {'cases':>6} {'worst':>10} {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.mechanism:<12} {r.test:<24} {r.cases:>6} {r.worst:>10.2e} {r.tol:>8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed")
    return "\n".join(lines)
