"""Command-line entry point: ``w4ax <command> ...``.

Exit codes: 0 success, 1 check failure, 2 data error, 3 schema mismatch,
64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import random
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .container import read_cmta, read_cmtq, write_cmta, write_cmtq
from .errors import DimensionError, FormatError, W4AxError
from .fmpq import (
    DEFAULT_BLOCK,
    DEFAULT_THETA,
    BlockPrecisionMap,
    assign_block_precision,
    build_permutation,
    detect_outliers,
    unpermute_channels,
)
from .gemm import TileConfig, dequantized_reference, mixed_gemm, prepare_weights, relative_error
from .packing import interleave_weights, unpack_nibbles
from .quant import IntTensor, collect_calib_stats, dequantize
from .synthetic import synthetic_activations

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_DATA = 2
EXIT_SCHEMA = 3
EXIT_USAGE = 64

GEMM_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be >= 1")
    return v


def _workers(args) -> int:
    env = os.environ.get("COMET_WORKERS")
    if env:
        try:
            return _positive(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"COMET_WORKERS: {exc}")
    return args.workers


def _manifest(args, command: str, config: dict, inputs=(), outputs=()) -> None:
    if getattr(args, "manifest", None):
        RunManifest(command, config, getattr(args, "seed", 0), [str(p) for p in inputs], [str(p) for p in outputs]).write(
            args.manifest
        )


# ---------------------------------------------------------------- calibrate


def _parse_synthetic(items: List[str]) -> dict:
    opts = {"C": 512, "outliers": 5, "rows": 256, "gain": 50.0}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or key not in opts:
            raise UsageError(f"bad --synthetic option {item!r} (use C=, outliers=, rows=, gain=)")
        try:
            opts[key] = type(opts[key])(val)
        except ValueError:
            raise UsageError(f"bad value in {item!r}")
    if opts["C"] < 1 or opts["rows"] < 0 or not 0 <= opts["outliers"] <= opts["C"]:
        raise UsageError("synthetic sizes out of range")
    return opts


def cmd_calibrate(args) -> int:
    if not args.inputs and args.synthetic is None:
        raise UsageError("give input files or --synthetic")
    batches = []
    if args.synthetic is not None:
        o = _parse_synthetic(args.synthetic)
        batches.append(synthetic_activations(o["rows"], o["C"], o["outliers"], o["gain"], args.seed))
    for path in args.inputs:
        try:
            batches.append(read_cmta(path))
        except FileNotFoundError:
            print(f"error: cannot read {path}", file=sys.stderr)
            return EXIT_DATA
        except FormatError as exc:
            print(f"error: {path}: {exc}; no samples", file=sys.stderr)
            return EXIT_DATA
    batches = [b for b in batches if np.size(b)]
    if not batches:
        print("error: no samples", file=sys.stderr)
        return EXIT_DATA
    try:
        stats = collect_calib_stats(batches)
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    report = detect_outliers(stats, args.theta)
    perm = build_permutation(report, args.k)
    pmap = assign_block_precision(stats, perm, report, args.k)
    Path(args.out).write_text(pmap.to_json() + "\n")
    outputs = [args.out]
    if args.stats_out:
        Path(args.stats_out).write_text(stats.to_json() + "\n")
        outputs.append(args.stats_out)
    n8 = sum(b == 8 for b in pmap.block_bits)
    print(f"channels={stats.num_channels} samples={stats.sample_count} outliers={len(report.outliers)}")
    print(f"blocks={pmap.num_blocks} eight_bit_blocks={n8} eight_bit_fraction={pmap.eight_bit_fraction():.4f}")
    print(f"median_maxabs={report.median_score:.6g} threshold={report.threshold_factor * report.median_score:.6g}")
    if args.plot_dir:
        from .plotting import plot_channel_scores

        outputs.append(plot_channel_scores(report, args.k, Path(args.plot_dir) / "channel_scores.png"))
    _manifest(args, "calibrate", {"theta": args.theta, "k": args.k, "synthetic": args.synthetic}, args.inputs, outputs)
    return EXIT_OK


# ---------------------------------------------------------------- quantize


def cmd_quantize(args) -> int:
    try:
        W = read_cmta(args.weights)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {args.weights}: {exc}", file=sys.stderr)
        return EXIT_DATA
    if W.ndim != 2 or W.size == 0:
        print(f"error: weights must be a non-empty (K, N) matrix, got shape {W.shape}", file=sys.stderr)
        return EXIT_SCHEMA
    pmap = None
    if args.map:
        try:
            pmap = BlockPrecisionMap.from_json(Path(args.map).read_text())
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {args.map}: {exc}", file=sys.stderr)
            return EXIT_SCHEMA
        if pmap.num_channels != W.shape[0]:
            print(f"error: map covers {pmap.num_channels} channels, weights have K={W.shape[0]}", file=sys.stderr)
            return EXIT_SCHEMA
    qw = prepare_weights(W, pmap, args.group)
    buf = qw.packed
    if args.interleave:
        if qw.K % 16:
            print("error: interleave needs K divisible by 16", file=sys.stderr)
            return EXIT_SCHEMA
        buf = interleave_weights(qw.int_values(), 4, 16)
    size = write_cmtq(args.out, buf, qw.params)
    payload = buf.nbytes
    print(f"shape={W.shape[0]}x{W.shape[1]} payload_bytes={payload} file_bytes={size}")
    print(f"compression_vs_f32={W.size * 4 / payload:.2f}x compression_vs_fp16={W.size * 2 / payload:.2f}x")
    outputs = [args.out]
    if args.dequantize_out:
        back_buf, params = read_cmtq(args.out)
        vals = unpack_nibbles(back_buf)[:, : qw.K]
        deq = dequantize(IntTensor(vals, params)).T
        if pmap is not None:
            deq = unpermute_channels(deq, pmap.permutation, axis=0)
        write_cmta(args.dequantize_out, deq)
        outputs.append(args.dequantize_out)
        print(f"max_abs_roundtrip_error={np.max(np.abs(deq - W)):.6g}")
    _manifest(args, "quantize", {"group": args.group, "interleave": args.interleave}, [args.weights, args.map or ""], outputs)
    return EXIT_OK


# ---------------------------------------------------------------- gemm


def cmd_gemm(args) -> int:
    from .fmpq import calibrate

    workers = _workers(args)
    M, N, K = args.m, args.n, args.k
    act = synthetic_activations(M, K, min(args.outliers, K), 50.0, args.seed)
    W = np.random.default_rng(args.seed + 1).normal(size=(K, N))
    pmap = calibrate(collect_calib_stats(act), args.theta, args.block)
    qw = prepare_weights(W, pmap, args.group)
    cfg = TileConfig(args.tile, args.tile, args.tile)
    t0 = time.perf_counter_ns()
    out = mixed_gemm(act, qw, pmap, cfg, workers)
    wall = time.perf_counter_ns() - t0
    digest = hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest()
    ok = True
    if args.check:
        err = relative_error(out, dequantized_reference(act, qw, pmap))
        ok = err <= GEMM_TOLERANCE
        print(f"{'OK' if ok else 'FAIL'} rel_err={err:.3e}")
    print(f"sha256={digest}")
    row = [M, N, K, workers, wall, int(ok) if args.check else ""]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["M", "N", "K", "workers", "wall_ns", "checks_passed"])
    w.writerow(row)
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            if new:
                cw.writerow(["M", "N", "K", "workers", "wall_ns", "checks_passed"])
            cw.writerow(row)
    if args.out:
        np.save(args.out, out)
    _manifest(args, "gemm", {"m": M, "n": N, "k": K, "workers": workers, "block": args.block}, [], [args.out] if args.out else [])
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- simulate


def _strategy_table(rows) -> str:
    out = io.StringIO()
    out.write(f"{'strategy':<14} {'makespan':>9} {'speedup':>8} {'util':>6}\n")
    for r in rows:
        out.write(f"{r.name:<14} {float(r.makespan):>9.4g} {r.speedup:>7.3f}x {r.mean_utilization:>6.3f}\n")
    return out.getvalue()


def cmd_simulate(args) -> int:
    from .sim import (
        SimConfig,
        compare_strategies,
        ordering_holds,
        parse_tiles_spec,
        random_workload,
    )

    try:
        base = SimConfig(
            num_sms=args.sms,
            cost4=Fraction(args.cost4),
            cost8=Fraction(args.cost8),
            barrier_overhead=Fraction(args.barrier_overhead),
            steal_granularity=Fraction(args.steal_granularity),
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.sweep:
        bad = 0
        print("seed,tiles,naive,final_barrier,remap,stealing,ordering_ok")
        for seed in range(args.seed, args.seed + args.sweep):
            rnd = random.Random(seed)
            tasks = random_workload(rnd.randint(args.sms, 8 * args.sms), 0.5, seed)
            rows = compare_strategies(tasks, base)
            ok = ordering_holds(rows)
            bad += not ok
            print(",".join([str(seed), str(len(tasks))] + [f"{float(r.makespan):g}" for r in rows[1:]] + [str(int(ok))]))
        print(f"sweep={args.sweep} inversions={bad}")
        return EXIT_OK if bad == 0 else EXIT_CHECK
    try:
        tasks = parse_tiles_spec(args.tiles_spec, args.seed)
    except ValueError as exc:
        raise UsageError(f"malformed --tiles-spec: {exc}")
    rows = compare_strategies(tasks, base)
    if args.strategy != "all":
        rows = [r for r in rows if r.name in ("w4a8-uniform", args.strategy)]
    sys.stdout.write(_strategy_table(rows))
    outputs = []
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "makespan", "speedup", "mean_utilization"])
            for r in rows:
                w.writerow([r.name, f"{float(r.makespan):g}", f"{r.speedup:.6f}", f"{r.mean_utilization:.6f}"])
        outputs.append(args.csv)
    if args.timeline:
        dump = {r.name: json.loads(r.report.timeline_json()) for r in rows}
        Path(args.timeline).write_text(json.dumps(dump, indent=1) + "\n")
        outputs.append(args.timeline)
    if args.plot_dir:
        from .plotting import plot_strategies, plot_timeline

        prec = {t.task_id: t.precision.value for t in tasks}
        for r in rows:
            lookup = (lambda i: "W4A8") if r.name == "w4a8-uniform" else prec.__getitem__
            outputs.append(plot_timeline(r.report, lookup, Path(args.plot_dir) / f"timeline_{r.name}.png", r.name))
        outputs.append(plot_strategies(rows, Path(args.plot_dir) / "strategies.png"))
    _manifest(args, "simulate", {"sms": args.sms, "tiles_spec": args.tiles_spec}, [], outputs)
    return EXIT_OK


# ---------------------------------------------------------------- demo-forward

CONFIGS = {
    "tiny": dict(B=2, L=16, H=256, heads=4, layers=2),
    "micro": dict(B=1, L=4, H=128, heads=2, layers=1),
}


def cmd_demo_forward(args) -> int:
    from .runtime import (
        ModelConfig,
        ReferenceModel,
        init_weights,
        kv_memory_footprint,
        quantize_model,
        token_activations,
    )

    if args.config not in CONFIGS:
        raise UsageError(f"unknown config {args.config!r}; choose from {sorted(CONFIGS)}")
    base = CONFIGS[args.config]
    cfg = ModelConfig(**base, max_len=base["L"] + args.steps)
    weights = init_weights(cfg, args.seed)
    calib = token_activations(replace(cfg, B=4 * cfg.B), 64, seed=args.seed + 100)
    stream = token_activations(cfg, cfg.L + args.steps, seed=args.seed + 1)
    model = quantize_model(cfg, weights, calib, _workers(args))
    ref = ReferenceModel(cfg, weights)
    q, _ = model.prefill(stream[:, : cfg.L])
    r = ref.prefill(stream[:, : cfg.L])
    errors = [relative_error(q, r)]
    for s in range(args.steps):
        tok = stream[:, cfg.L + s : cfg.L + s + 1]
        q, _ = model.generate_step(tok)
        errors.append(relative_error(q, ref.generate_step(tok)))
    print("step,seq_len,rel_err")
    for i, e in enumerate(errors):
        print(f"{i},{cfg.L + i},{e:.6e}")
    print()
    print(f"{'seq_len':>8} {'kv4_payload':>12} {'params':>8} {'total':>8} {'fp16_payload':>13} {'ratio':>6}")
    lens = sorted({0, cfg.L, cfg.L + args.steps})
    for n in lens:
        fp = kv_memory_footprint(cfg, n)
        ratio = fp.payload_bytes / fp.fp16_payload_bytes if fp.fp16_payload_bytes else 0.0
        print(f"{n:>8} {fp.payload_bytes:>12} {fp.params_bytes:>8} {fp.total_bytes:>8} {fp.fp16_payload_bytes:>13} {ratio:>6.3f}")
    gen = kv_memory_footprint(cfg, args.steps).payload_bytes
    print(f"generated_payload_bytes={gen} cache_payload_bytes={model.cache.payload_bytes()}")
    outputs = []
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "seq_len", "rel_err"])
            for i, e in enumerate(errors):
                w.writerow([i, cfg.L + i, f"{e:.6e}"])
        outputs.append(args.csv)
    if args.plot_dir:
        from .plotting import plot_footprint, plot_forward_errors

        outputs.append(plot_forward_errors(list(range(len(errors))), errors, Path(args.plot_dir) / "forward_error.png"))
        seq = list(range(0, cfg.L + args.steps + 1, max(1, (cfg.L + args.steps) // 16)))
        fps = [kv_memory_footprint(cfg, n) for n in seq]
        outputs.append(
            plot_footprint(seq, [f.total_bytes for f in fps], [f.fp16_payload_bytes for f in fps], Path(args.plot_dir) / "kv_footprint.png")
        )
    _manifest(args, "demo-forward", {"config": args.config, "steps": args.steps}, [], outputs)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="w4ax", description="Mixed-precision W4Ax quantization and scheduling toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="build a block precision map from activations")
    c.add_argument("inputs", nargs="*", help="CMTA activation files (rows x channels)")
    c.add_argument("--synthetic", nargs="*", metavar="KEY=VAL", help="seeded generator: C=, outliers=, rows=, gain=")
    c.add_argument("--theta", type=float, default=DEFAULT_THETA)
    c.add_argument("--k", type=_positive, default=DEFAULT_BLOCK, help="channels per block")
    c.add_argument("--out", required=True, help="precision-map JSON path")
    c.add_argument("--stats-out")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--plot-dir")
    c.add_argument("--manifest")
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", help="pack INT4 weights into a CMTQ file")
    q.add_argument("weights", help="CMTA weight file, shape (K, N)")
    q.add_argument("--map", help="precision-map JSON from calibrate")
    q.add_argument("--out", required=True)
    q.add_argument("--group", type=_positive, default=128)
    q.add_argument("--interleave", action="store_true")
    q.add_argument("--dequantize-out", help="write the dequantized weights (CMTA) read back from --out")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--manifest")
    q.set_defaults(func=cmd_quantize)

    g = sub.add_parser("gemm", help="run one mixed-precision GEMM on synthetic operands")
    g.add_argument("--m", type=_positive, required=True)
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--k", type=_positive, required=True)
    g.add_argument("--workers", type=_positive, default=1)
    g.add_argument("--check", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--outliers", type=int, default=5)
    g.add_argument("--theta", type=float, default=DEFAULT_THETA)
    g.add_argument("--block", type=_positive, default=DEFAULT_BLOCK)
    g.add_argument("--group", type=_positive, default=128)
    g.add_argument("--tile", type=_positive, default=128)
    g.add_argument("--csv")
    g.add_argument("--out", help="save the output matrix (.npy)")
    g.add_argument("--manifest")
    g.set_defaults(func=cmd_gemm)

    s = sub.add_parser("simulate", help="compare SM scheduling strategies")
    s.add_argument("--sms", type=_positive, default=4)
    s.add_argument("--tiles-spec", default="alt:18")
    s.add_argument("--strategy", default="all", choices=["all", "naive", "final-barrier", "remap", "stealing"])
    s.add_argument("--cost4", default="1")
    s.add_argument("--cost8", default="2")
    s.add_argument("--barrier-overhead", default="0")
    s.add_argument("--steal-granularity", default="1/2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sweep", type=int, default=0, help="run N random 50%%-INT4 workloads instead")
    s.add_argument("--csv")
    s.add_argument("--timeline", help="JSON dump of every strategy's events")
    s.add_argument("--plot-dir")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("demo-forward", help="toy transformer: prefill + generation vs float64")
    d.add_argument("--config", default="tiny")
    d.add_argument("--steps", type=int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--workers", type=_positive, default=1)
    d.add_argument("--csv")
    d.add_argument("--plot-dir")
    d.add_argument("--manifest")
    d.set_defaults(func=cmd_demo_forward)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "steps", 0) is not None and getattr(args, "steps", 0) < 0:
        parser.error("--steps must be non-negative")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"w4ax: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except W4AxError as exc:
        print(f"w4ax: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
