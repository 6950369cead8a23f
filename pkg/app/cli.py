#!/usr/bin/env python3
"""
HATK command-line interface.

Subcommands: curve, mask, report, attn, cost, sweep, render.
Exit codes: 0 success, 1 invalid input, 2 acceptance mismatch.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from core.block_analysis import BlockSpec, classify, sparsity
from core.config import TABLES_SWEEP_PATH, load_settings
from core.errors import ToolkitError, ValidationError
from core.grid_curve import GridShape, OrderingKind, get_mapping, step_profile
from core.patterns import PatternKind, PatternSpec, make_pattern, materialize_mask
from core.tensor_io import load_tensor, save_tensor
from ml.attention import (
    AttnTensors, NO_MOD, backward, dense_forward, engine_tolerance, global_rpb,
    random_tensors, sparse_forward,
)
from ml.cost_model import (
    CostParams, calibrate, estimate_time, load_histogram, load_samples, predicted_speedup,
)
from app.render import render, write_artifact
from app.sweep import (
    OUTPUT_FORMATS, format_rows, load_references, load_sweep, parse_pair,
    run_sweep, summarize,
)
from telemetry.logger import get_logger, log_event
from telemetry.prometheus_metrics import get_metrics

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_MISMATCH = 2

DTYPE_NAMES = {"f32": "float32", "f64": "float64"}


class ToolkitArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ============================================================================
# HELPERS
# ============================================================================

def _pair(text: str):
    try:
        return parse_pair(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or A,B, got {text!r}")


def _shape(args) -> GridShape:
    if args.shape:
        return GridShape.parse(args.shape)
    if args.height is None:
        raise ValidationError("give --shape or --height [--width]")
    return GridShape(args.height, args.width if args.width is not None else args.height)


def _pattern(args, kind: Optional[str] = None) -> PatternSpec:
    return make_pattern(kind or args.pattern, _shape(args), window=args.window, kernel=args.kernel,
                        radius=args.radius, shift=args.shift)


def _blocks(args) -> BlockSpec:
    return BlockSpec.parse(args.block)


def _emit(text: str, out: Optional[str]):
    """Write to --out when given, else stdout"""
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        logger.info(f"Wrote {path}")
    else:
        print(text)


def _banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _write_metrics(path: Optional[str]):
    if path:
        get_metrics().write(path)
        logger.info(f"Metrics written to {path}")


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_curve(args) -> int:
    """Emit a curve mapping as JSON, optionally with an SVG of the path"""
    shape = _shape(args)
    mapping = get_mapping(shape, OrderingKind(args.kind))
    data = {"shape": [shape.height, shape.width], "kind": mapping.kind.value,
            "order": mapping.order.tolist()}
    if args.profile:
        data["steps"] = step_profile(mapping)
    _emit(json.dumps(data), args.out)
    if args.svg:
        write_artifact(args.svg, render(mapping, "svg"))
    return EXIT_OK


def cmd_mask(args) -> int:
    """Materialize a mask: PGM image and JSON summary with the row-sum histogram"""
    spec = _pattern(args)
    mask = materialize_mask(spec)
    sums = mask.row_sums()
    values, counts = np.unique(sums, return_counts=True)
    summary = {
        "pattern": spec.to_dict(),
        "n": mask.n,
        "allowed_pairs": int(sums.sum()),
        "density": float(sums.sum()) / (mask.n * mask.n),
        "symmetric": mask.is_symmetric(),
        "row_sum_histogram": {str(int(v)): int(c) for v, c in zip(values, counts)},
    }
    if args.pgm:
        write_artifact(args.pgm, render(mask, "pgm", scale=args.scale))
    _emit(json.dumps(summary, indent=2), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    """Sparsity census of one pattern, or of a whole sweep file"""
    if args.sweep:
        config = load_sweep(args.sweep)
        rows = run_sweep(config, threads=args.threads)
        fmt = args.format or config.output_format
        _emit(format_rows(rows, fmt, config.seed), args.out)
        return EXIT_INVALID if any(row.status == "error" for row in rows) else EXIT_OK

    spec = _pattern(args)
    report = sparsity(classify(spec, _blocks(args), threads=args.threads))
    fmt = args.format or "json"
    if fmt == "json":
        _emit(json.dumps(report.to_dict(), indent=2), args.out)
    elif fmt == "csv":
        _emit(pd.DataFrame([report.to_row()]).to_csv(index=False), args.out)
    else:
        _banner(f"SPARSITY: {spec.label}")
        for key, value in report.to_row().items():
            print(f"{key + ':':<22}{value}")
        print("=" * 60 + "\n")
    return EXIT_OK


def _load_attn_tensors(args, n: int) -> AttnTensors:
    if args.q or args.k or args.v:
        if not (args.q and args.k and args.v):
            raise ValidationError("--q, --k and --v must be given together")
        return AttnTensors(load_tensor(args.q), load_tensor(args.k), load_tensor(args.v))
    return random_tensors(args.batch, args.heads, n, args.dim, DTYPE_NAMES[args.dtype], seed=args.seed)


def cmd_attn(args) -> int:
    """Run the block-sparse engine, optionally checked against the dense oracle"""
    spec = _pattern(args)
    grid = classify(spec, _blocks(args), threads=args.threads)
    tensors = _load_attn_tensors(args, spec.n)
    mod = global_rpb(tensors.heads, spec.shape, spec.mapping, seed=args.seed) if args.rpb else NO_MOD

    started = time.perf_counter()
    out, stats = sparse_forward(tensors, grid, spec, mod, threads=args.threads)
    sparse_seconds = time.perf_counter() - started
    get_metrics().record_engine_run(spec.kind.value, stats.block_visits_total, stats.elementwise_masks_applied)

    _banner(f"ATTENTION: {spec.label}")
    print(f"Tensors:             {tensors.batch}x{tensors.heads}x{tensors.n}x{tensors.dim} {tensors.dtype}")
    print(f"Blocks visited:      {stats.blocks_visited} per slice (R={grid.r}, {stats.slices} slices)")
    print(f"Element-wise masks:  {stats.elementwise_masks_applied}")
    print(f"Pairs evaluated:     {stats.pairs_evaluated}")
    print(f"Sparse wall time:    {sparse_seconds * 1e3:.2f} ms")

    status = EXIT_OK
    result = {"pattern": spec.to_dict(), "stats": stats.to_dict(), "sparse_seconds": sparse_seconds}
    if args.check:
        tolerance = engine_tolerance(tensors.dtype)
        mask = materialize_mask(spec)
        started = time.perf_counter()
        reference = dense_forward(tensors, mask, mod)
        dense_seconds = time.perf_counter() - started
        deviation = float(np.max(np.abs(out - reference)))
        get_metrics().record_deviation(spec.kind.value, deviation)
        result.update({"dense_seconds": dense_seconds, "max_deviation": deviation, "tolerance": tolerance})
        print(f"Dense wall time:     {dense_seconds * 1e3:.2f} ms")
        print(f"Max deviation:       {deviation:.3e} (tolerance {tolerance:.0e})")

        if args.backward:
            grad_out = np.random.default_rng(args.seed + 1).standard_normal(tensors.q.shape).astype(tensors.dtype)
            dense_grads = backward(tensors, mask, mod, grad_out)
            sparse_grads = backward(tensors, grid, mod, grad_out, spec=spec, threads=args.threads)
            grad_deviation = sparse_grads.max_abs_diff(dense_grads)
            result["max_grad_deviation"] = grad_deviation
            print(f"Max grad deviation:  {grad_deviation:.3e}")
            deviation = max(deviation, grad_deviation)

        if deviation > tolerance:
            logger.error(f"Engine deviation {deviation:.3e} exceeds {tolerance:.0e} for {spec.label}")
            status = EXIT_MISMATCH
        print(f"Check:               {'PASS' if status == EXIT_OK else 'FAIL'}")
    print("=" * 60 + "\n")

    if args.save:
        save_tensor(args.save, out)
    if args.out:
        _emit(json.dumps(result, indent=2), args.out)
    log_event("attn_run", {"pattern": spec.label, **{k: v for k, v in result.items() if k != "pattern"}})
    _write_metrics(args.metrics)
    return status


def cmd_cost(args) -> int:
    """Evaluate the CTA cost model, or calibrate it from measured samples"""
    if args.action == "calibrate":
        if not args.samples:
            raise ValidationError("cost calibrate needs --samples FILE.json")
        params = calibrate(load_samples(args.samples), p_eff=args.peff)
        _banner("COST MODEL CALIBRATION")
        print(f"alpha (per CTA):     {params.alpha:.6e} s")
        print(f"beta (per tile):     {params.beta:.6e} s")
        print(f"P_eff:               {params.p_eff}")
        print(f"R^2:                 {params.r2:.6f}")
        print(f"Samples:             {params.samples}")
        print("=" * 60 + "\n")
        if args.out:
            _emit(json.dumps(params.to_dict(), indent=2), args.out)
        return EXIT_OK

    if args.alpha is None or args.beta is None:
        raise ValidationError("cost needs --alpha and --beta (or the calibrate action)")
    params = CostParams(args.alpha, args.beta, args.peff if args.peff is not None else load_settings().p_eff)
    spec = _pattern(args)
    grid = classify(spec, _blocks(args), threads=args.threads)
    slices = args.batch * args.heads
    seconds = estimate_time(grid, params, slices=slices)
    histogram = load_histogram(grid)
    result = {"pattern": spec.label, "ctas": int(len(grid.real_query_rows())), "r_total": grid.r,
              "slices": slices, "seconds": seconds, "r_histogram": {str(k): v for k, v in histogram.items()}}

    _banner(f"COST ESTIMATE: {spec.label}")
    print(f"CTAs (M):            {result['ctas']} x {slices} slices")
    print(f"Non-empty tiles (R): {grid.r}")
    print(f"Estimated time:      {seconds:.6e} s")
    print("r_i histogram:")
    for r, count in histogram.items():
        print(f"  r={r:<6} {count} CTAs")

    if args.versus:
        other = _pattern(args, kind=args.versus)
        other_grid = classify(other, _blocks(args), threads=args.threads)
        speedup = predicted_speedup(other_grid, grid, params)
        result["speedup_over"] = {"pattern": other.label, "speedup": speedup}
        print(f"Speedup vs {other.kind.value}:   {speedup:.3f}x")
    print("=" * 60 + "\n")
    if args.out:
        _emit(json.dumps(result, indent=2), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Run a sweep file; with --verify, fail on reference mismatches"""
    config = load_sweep(args.config)
    if args.seed is not None:
        config.seed = args.seed
    references = load_references(args.references)
    rows = run_sweep(config, references, threads=args.threads)
    fmt = args.format or config.output_format
    _emit(format_rows(rows, fmt, config.seed), args.out)

    summary = summarize(rows)
    logger.info(f"Sweep finished: {summary}")
    _write_metrics(args.metrics)

    if any(row.status == "error" for row in rows):
        return EXIT_INVALID
    if args.verify:
        mismatches = [row for row in rows if row.status == "mismatch"]
        for row in mismatches:
            log_event("verification_mismatch", {"case": row.case_id, "message": row.message})
        if mismatches:
            print(f"{len(mismatches)} case(s) differ from the reference", file=sys.stderr)
            return EXIT_MISMATCH
    return EXIT_OK


def cmd_render(args) -> int:
    """Render a curve path, a mask or a block grid"""
    if args.what == "curve":
        artifact = get_mapping(_shape(args), OrderingKind(args.kind))
    else:
        spec = _pattern(args)
        if args.what == "mask":
            artifact = materialize_mask(spec)
        else:
            artifact = classify(spec, _blocks(args), threads=args.threads)
    if not args.out:
        raise ValidationError("render needs --out PATH")
    write_artifact(args.out, render(artifact, args.format, scale=args.scale))
    return EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

def _add_pattern_args(parser, block: bool = True):
    parser.add_argument("--pattern", choices=[k.value for k in PatternKind], default="hwa",
                        help="Attention pattern (default: hwa)")
    _add_shape_args(parser)
    parser.add_argument("--window", type=_pair, help="Window WH,WW (or one side)")
    parser.add_argument("--kernel", type=_pair, help="Kernel KH,KW (or one side)")
    parser.add_argument("--radius", type=int, help="1D radius for hsa/hna")
    parser.add_argument("--shift", type=int, help="1D shift for hswa")
    if block:
        parser.add_argument("--block", default="128", help="Block size BQ[,BK] (default: 128)")


def _add_shape_args(parser):
    parser.add_argument("--shape", help="Grid HxW, e.g. 64x64")
    parser.add_argument("--height", type=int, help="Grid height")
    parser.add_argument("--width", type=int, help="Grid width (default: height)")


def _common_parser(seed_default: Optional[int] = 0, seed_help: str = "RNG seed (default: 0)"):
    common = ToolkitArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=seed_default, help=seed_help)
    common.add_argument("--threads", type=int, default=None, help="Worker threads (0 = one per core)")
    common.add_argument("--out", help="Output file (default: stdout)")
    common.add_argument("--log-level", default=None, help="Console log level (default: configured)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    # sweep files carry their own seed; --seed overrides it only when given
    sweep_common = _common_parser(None, "RNG seed (default: from the sweep file)")

    parser = ToolkitArgumentParser(
        prog="hatk",
        description="Hilbert-curve local attention toolkit: curves, masks, block sparsity, engines and cost model",
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    curve = subparsers.add_parser("curve", parents=[common], help="Emit a grid ordering as JSON")
    _add_shape_args(curve)
    curve.add_argument("--kind", choices=[k.value for k in OrderingKind], default="hilbert")
    curve.add_argument("--svg", help="Also write an SVG of the path")
    curve.add_argument("--profile", action="store_true", help="Include step adjacency counts")

    mask = subparsers.add_parser("mask", parents=[common], help="Materialize a pattern mask")
    _add_pattern_args(mask, block=False)
    mask.add_argument("--pgm", help="Write the mask as a PGM image (white = allowed)")
    mask.add_argument("--scale", type=int, default=1, help="Pixels per mask entry (default: 1)")

    report = subparsers.add_parser("report", parents=[common], help="Block sparsity census")
    _add_pattern_args(report)
    report.add_argument("--format", choices=OUTPUT_FORMATS, help="Output format")
    report.add_argument("--sweep", help="Census of every case of a sweep file instead")

    attn = subparsers.add_parser("attn", parents=[common], help="Run the attention engines")
    _add_pattern_args(attn)
    attn.add_argument("--batch", type=int, default=1)
    attn.add_argument("--heads", type=int, default=2)
    attn.add_argument("--dim", type=int, default=16)
    attn.add_argument("--dtype", choices=list(DTYPE_NAMES), default="f64")
    attn.add_argument("--rpb", action="store_true", help="Add a global relative position bias")
    attn.add_argument("--check", action="store_true", help="Compare with the dense oracle")
    attn.add_argument("--backward", action="store_true", help="With --check, also compare gradients")
    attn.add_argument("--q", help="Load q from a HATK tensor file")
    attn.add_argument("--k", help="Load k from a HATK tensor file")
    attn.add_argument("--v", help="Load v from a HATK tensor file")
    attn.add_argument("--save", help="Save the output as a HATK tensor file")
    attn.add_argument("--metrics", help="Write Prometheus metrics to this file")

    cost = subparsers.add_parser("cost", parents=[common], help="CTA cost model")
    cost.add_argument("action", nargs="?", choices=["estimate", "calibrate"], default="estimate")
    _add_pattern_args(cost)
    cost.add_argument("--alpha", type=float, help="Seconds per CTA")
    cost.add_argument("--beta", type=float, help="Seconds per non-empty tile")
    cost.add_argument("--peff", type=float, default=None, help="Effective parallelism (default: configured)")
    cost.add_argument("--batch", type=int, default=1)
    cost.add_argument("--heads", type=int, default=1)
    cost.add_argument("--versus", choices=[k.value for k in PatternKind],
                      help="Predicted speedup of --pattern over this pattern")
    cost.add_argument("--samples", help="Calibration samples (JSON)")

    sweep = subparsers.add_parser("sweep", parents=[sweep_common], help="Run a sweep file")
    sweep.add_argument("config", nargs="?", default=str(TABLES_SWEEP_PATH),
                       help="Sweep file (default: bundled published tables)")
    sweep.add_argument("--verify", action="store_true", help="Exit 2 if a case differs from its reference")
    sweep.add_argument("--format", choices=OUTPUT_FORMATS)
    sweep.add_argument("--references", help="Reference values JSON (default: bundled)")
    sweep.add_argument("--metrics", help="Write Prometheus metrics to this file")

    rend = subparsers.add_parser("render", parents=[common], help="Render SVG/PGM artifacts")
    rend.add_argument("what", choices=["curve", "mask", "blocks"])
    _add_pattern_args(rend)
    rend.add_argument("--kind", choices=[k.value for k in OrderingKind], default="hilbert")
    rend.add_argument("--format", choices=["svg", "pgm"], default="svg")
    rend.add_argument("--scale", type=int, default=None, help="Pixels per cell")

    return parser


COMMANDS = {
    "curve": cmd_curve,
    "mask": cmd_mask,
    "report": cmd_report,
    "attn": cmd_attn,
    "cost": cmd_cost,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_OK

    level = args.log_level or load_settings().log_level
    for package in ("core", "ml", "app", "telemetry"):
        get_logger(package, level)

    try:
        return COMMANDS[args.command](args)
    except (ToolkitError, ValueError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
