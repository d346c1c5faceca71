"""Command-line entry point: verification, cost accounting and runtime benchmarks.

Exit codes: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attention.mechanisms import msa_backward, msa_forward
from .attention.spec import AttentionSpec, Kind, MaskingMode, init_msa_params
from .complexity import CSV_HEADER, attn_pairs, flops_model
from .configs import (WINDOW_PRESETS, dumps_config, known_names, load_config, with_attention,
                      with_windows)
from .model import Model, model_forward, param_breakdown, param_count
from .tensor import make_rng
from .verify import MECHANISMS, format_report, run_suite
from .weights import load_weights, save_weights

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ATTENTION_SWAPS = ("vil", "full", "global", "linformer", "sra32", "sra64", "performer")


class UsageError(Exception):
    pass


def _resolve_config(args):
    try:
        cfg = load_config(args.config)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    except (ValueError, OSError) as e:
        raise UsageError(f"bad config {args.config!r}: {e}") from None
    if getattr(args, "attention", None):
        cfg = with_attention(cfg, args.attention)
    if getattr(args, "windows", None):
        cfg = with_windows(cfg, args.windows)
    return cfg


def _write_csv(path, header, rows):
    out = sys.stdout if path == "-" else open(path, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()


# --- check -------------------------------------------------------------------

def cmd_check(args) -> int:
    mechs = MECHANISMS if "all" in args.mechanism else tuple(dict.fromkeys(args.mechanism))
    results = run_suite(mechs, grid_max=args.grid_max, seed=args.seed, f64=args.f64)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# --- flops / params ----------------------------------------------------------

def cmd_flops(args) -> int:
    cfg = _resolve_config(args)
    try:
        report = flops_model(cfg, args.resolution)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"{cfg.name} @ {args.resolution}x{args.resolution}")
    print(f"{'stage':>5} {'params (M)':>11} {'GFLOPs':>9}")
    for stage, p, f in report.stage_totals():
        print(f"{'head' if stage is None else stage:>5} {p / 1e6:>11.3f} {f / 1e9:>9.3f}")
    print(f"{'total':>5} {report.params / 1e6:>11.3f} {report.gflops:>9.3f}")
    if args.csv:
        text = report.to_csv()
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            Path(args.csv).write_text(text)
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    try:
        rows = param_breakdown(cfg, args.resolution, args.num_classes, args.pos_mode)
    except ValueError as e:
        raise UsageError(str(e)) from None
    total = sum(r[2] for r in rows)
    print(f"{cfg.name}: {total} parameters ({total / 1e6:.3f}M)")
    per_stage = {}
    for stage, _, n in rows:
        per_stage[stage] = per_stage.get(stage, 0) + n
    for stage, n in per_stage.items():
        print(f"  {'head' if stage is None else f'stage {stage}'}: {n} ({n / 1e6:.3f}M)")
    if args.csv:
        _write_csv(args.csv, ["config", "stage", "component", "params"],
                   [[cfg.name, "" if s is None else s, comp, n] for s, comp, n in rows])
    return EXIT_OK


# --- forward -----------------------------------------------------------------

def content_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def cmd_forward(args) -> int:
    cfg = _resolve_config(args)
    try:
        model = Model.init(cfg, args.resolution, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.weights:
        try:
            model.load_state(load_weights(args.weights))
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(f"cannot load weights {args.weights!r}: {e}") from None
    if args.save_weights:
        save_weights(args.save_weights, model.named_parameters())
    img = make_rng(args.seed).standard_normal((args.resolution, args.resolution, cfg.in_chans))
    try:
        logits, feats = model_forward(img.astype(np.float32), model, head_mode=args.head)
    except ValueError as e:
        raise UsageError(str(e)) from None
    H, W, d = feats.shape
    print(f"config: {cfg.name}")
    print(f"features: {H}x{W}x{d}")
    print(f"logits: {logits.shape[0]}")
    print(f"logit min/mean/max: {logits.min():.6g} {logits.mean():.6g} {logits.max():.6g}")
    print(f"hash: {content_hash(logits, feats)}")
    return EXIT_OK


# --- bench -------------------------------------------------------------------

@dataclass
class BenchRecord:
    mechanism: str
    impl: str
    H: int
    W: int
    d: int
    heads: int
    window: int
    n_g: int
    repeats: int
    median_ns: int
    min_ns: int
    max_ns: int
    attn_pairs: int


BENCH_HEADER = list(BenchRecord.__dataclass_fields__)


def _bench_spec(mech, d, heads, window, n_g, H):
    kw = {}
    if mech == "sra":
        kw["sr_ratio"] = next(r for r in (8, 4, 2, 1) if H % r == 0)
    if mech == "global":
        n_g = max(n_g, 1)
    return AttentionSpec(kind=Kind(mech), heads=heads, dim=d, n_g=n_g, window=window,
                         masking=MaskingMode.NOPAD, **kw)


def bench_point(mech, impl, n, d=64, heads=1, window=15, n_g=1, repeats=3, backward=False,
                rpb=False, seed=0) -> BenchRecord:
    """Time one MSA block on an ``n x n`` grid: one warmup, then ``repeats`` timed runs."""
    if repeats < 3:
        raise ValueError("benchmarks need at least 3 repeats")
    spec = _bench_spec(mech, d, heads, window, n_g, n)
    rng = make_rng(seed)
    use_rpb = rpb and spec.kind in (Kind.FULL, Kind.VIL, Kind.GLOBAL)
    params = init_msa_params(spec, rng, grid=(n, n), rpb=use_rpb)
    x = rng.standard_normal((spec.n_g + n * n, d)).astype(np.float32)
    g = np.ones_like(x)
    run_impl = impl if spec.kind is Kind.VIL else "chunk"

    def run():
        out, cache = msa_forward(x, params, spec, (n, n), impl=run_impl)
        if backward:
            msa_backward(cache, params, spec, g)

    run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        run()
        times.append(time.perf_counter_ns() - t0)
    label = impl if spec.kind is Kind.VIL else ("dense" if spec.kind is Kind.FULL else "native")
    return BenchRecord(mech, label, n, n, d, heads, window, spec.n_g, repeats,
                       int(np.median(times)), min(times), max(times), attn_pairs(spec, n, n))


def loglog_slope(records: list[BenchRecord]) -> float:
    """Least-squares slope of log(median time) against log(token count)."""
    n = np.log([r.H * r.W for r in records])
    t = np.log([r.median_ns for r in records])
    return float(np.polyfit(n, t, 1)[0])


def cmd_bench(args) -> int:
    try:
        resolutions = [int(s) for s in args.resolutions.split(",")]
    except ValueError:
        raise UsageError(f"--resolutions must be comma-separated integers, got {args.resolutions!r}")
    mechs = [m.strip() for m in args.mechanism.split(",")]
    bad = [m for m in mechs if m not in MECHANISMS]
    if bad:
        raise UsageError(f"unknown mechanism(s) {bad}; choose from {', '.join(MECHANISMS)}")
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    records = []
    with threadpool_limits(limits=args.threads):
        for mech in mechs:
            group = []
            for n in resolutions:
                rec = bench_point(mech, args.impl, n, args.d, args.heads, args.window, args.n_g,
                                  args.repeats, args.backward, args.rpb, args.seed)
                group.append(rec)
                print(f"{mech:<10} {rec.impl:<6} {n:>4}x{n:<4} median {rec.median_ns / 1e6:10.2f} ms",
                      flush=True)
            if len(group) >= 2:
                print(f"slope {mech}/{group[0].impl}: {loglog_slope(group):.3f}")
            records += group
    if args.csv:
        _write_csv(args.csv, BENCH_HEADER, [list(asdict(r).values()) for r in records])
    return EXIT_OK


# --- config ------------------------------------------------------------------

def cmd_config(args) -> int:
    if args.list:
        print("\n".join(known_names()))
        return EXIT_OK
    if not args.config:
        raise UsageError("config: give --config or --list")
    text = dumps_config(_resolve_config(args))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msvil", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="oracle-equivalence and gradient suites")
    c.add_argument("--mechanism", nargs="+", default=["all"], choices=("all",) + MECHANISMS)
    c.add_argument("--grid-max", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--f64", action="store_true", help="run equivalence in float64 (tol 1e-9)")
    c.set_defaults(func=cmd_check)

    def add_config(sp, extra=True):
        sp.add_argument("--config", required=extra, help="registry name or config file path")
        sp.add_argument("--attention", choices=ATTENTION_SWAPS,
                        help="swap every stage to this mechanism (per-stage defaults)")
        sp.add_argument("--windows", help="window preset: " + ", ".join(WINDOW_PRESETS))

    f = sub.add_parser("flops", help="parameter and FLOP estimate per stage",
                       description="CSV columns: " + ",".join(CSV_HEADER))
    add_config(f)
    f.add_argument("--resolution", type=int, default=224)
    f.add_argument("--csv", help="write breakdown CSV to this path ('-' for stdout)")
    f.set_defaults(func=cmd_flops)

    pr = sub.add_parser("params", help="parameter count per stage",
                        description="CSV columns: config,stage,component,params")
    add_config(pr)
    pr.add_argument("--resolution", type=int, default=224)
    pr.add_argument("--num-classes", type=int)
    pr.add_argument("--pos-mode", choices=("ape", "rpb"))
    pr.add_argument("--csv")
    pr.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", help="time MSA blocks across grid sizes",
                       description="CSV columns: " + ",".join(BENCH_HEADER))
    b.add_argument("--mechanism", default="vil,full", help="comma-separated list")
    b.add_argument("--impl", choices=("chunk", "dense"), default="chunk",
                   help="ViL implementation; other mechanisms have one")
    b.add_argument("--resolutions", default="28,56,84,112", help="local grid sides")
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--window", type=int, default=15)
    b.add_argument("--n-g", type=int, default=1)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--backward", action="store_true")
    b.add_argument("--rpb", action="store_true", help="include relative positional bias")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)

    fw = sub.add_parser("forward", help="run the model on a seeded random image")
    add_config(fw)
    fw.add_argument("--resolution", type=int, default=224)
    fw.add_argument("--seed", type=int, default=0)
    fw.add_argument("--head", choices=("cls", "avgpool"))
    fw.add_argument("--weights", help="VILW weight file to load")
    fw.add_argument("--save-weights", help="write the model weights to this VILW file")
    fw.set_defaults(func=cmd_forward)

    cf = sub.add_parser("config", help="print a config in the plain-text format")
    add_config(cf, extra=False)
    cf.add_argument("--list", action="store_true", help="list registry names")
    cf.add_argument("--out")
    cf.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"msvil {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
