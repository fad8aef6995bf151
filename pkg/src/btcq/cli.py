"""Command-line front end.

Subcommands: quantize, dequantize, stats, nm-bits, bench, transform-fit.
Numbers are reported as key=value lines so scripts can parse them; the
bench and transform-fit subcommands additionally write tab-separated
tables with rendered figures next to them.  Usage errors exit with 2,
numeric or file failures with 1.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import container, lutgemm, pipeline
from .errors import ConfigError


def _parse_sizes(text: str):
    sizes = []
    for part in text.split(","):
        fields = part.strip().split("x")
        if len(fields) != 3:
            raise argparse.ArgumentTypeError(
                f"size {part!r} is not of the form BATCHxROWSxCOLS"
            )
        try:
            sizes.append(tuple(int(f) for f in fields))
        except ValueError:
            raise argparse.ArgumentTypeError(f"size {part!r} has non-integer fields")
    return sizes


def _emit(key, value) -> None:
    if isinstance(value, float):
        print(f"{key}={value!r}")
    else:
        print(f"{key}={value}")


def _write_tsv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cmd_quantize(args) -> int:
    w = container.read_weights(args.in_path)
    cfg = pipeline.QuantizeConfig(
        v=args.v,
        c=args.c,
        salient_fraction=args.salient_fraction,
        split_points=args.split_points,
        arb_iters=args.arb_iters,
        codebook_iters=args.codebook_iters,
        seed=args.seed,
    )
    layer = pipeline.btc_quantize(w, None, cfg)
    container.write_layer(args.out_path, layer)

    n, m = layer.n, layer.m
    _emit("n", n)
    _emit("m", m)
    _emit("v", layer.v)
    _emit("c", layer.c)
    _emit("index_count", layer.index_count)
    for key, value in layer.report.items():
        _emit(key, value)
    _emit("mse", layer.report["total_error"] / (n * m))
    bits = pipeline.effective_bits(layer.v, layer.c, n, m)
    overlay_bits = 0
    if layer.overlay is not None:
        # positions are stored as two 32-bit ints, signs as single bits
        overlay_bits = layer.overlay.count * 65 + 32 * n
    _emit("bits_per_weight", bits["bits_per_weight"])
    _emit("overlay_bits_per_weight", overlay_bits / (n * m))
    _emit("container_bytes", sum(s for _, s in container.section_layout(layer)))

    if m % layer.v == 0 and layer.v % args.mu_seg == 0:
        probe = np.random.default_rng(args.seed or 0).standard_normal((4, m))
        got = pipeline.layer_matmul(probe, layer, mu_seg=args.mu_seg)
        want = probe @ pipeline.dequantize(layer).T
        scale = max(float(np.max(np.abs(want))), np.finfo(np.float64).tiny)
        _emit("lut_check_max_rel", float(np.max(np.abs(got - want))) / scale)
    else:
        _emit("lut_check", "skipped (columns not aligned to v and mu-seg)")
    return 0


def _cmd_dequantize(args) -> int:
    layer = container.read_layer(args.in_path)
    w_hat = pipeline.dequantize(layer)
    container.write_weights(args.out_path, w_hat)
    _emit("n", layer.n)
    _emit("m", layer.m)
    _emit("overlay", int(layer.overlay is not None))
    _emit("transform", int(layer.transform is not None))
    if args.ref is not None:
        ref = container.read_weights(args.ref)
        if ref.shape != w_hat.shape:
            raise ConfigError(
                f"reference shape {ref.shape} != reconstruction {w_hat.shape}"
            )
        _emit("mse", float(np.mean((ref - w_hat) ** 2)))
    return 0


def _cmd_stats(args) -> int:
    bits = pipeline.effective_bits(args.v, args.c, args.rows, args.cols)
    for key, value in bits.items():
        _emit(key, value)
    # fractional accounting uses log2(c) without the ceiling
    frac_index = float(np.log2(args.c)) / args.v
    total_frac = args.v * args.c + frac_index * args.rows * args.cols
    _emit("index_bits_per_weight_fractional", frac_index)
    _emit("bits_per_weight_fractional", total_frac / (args.rows * args.cols))
    _emit("codebook_overhead", bits["codebook_bits"] / bits["total_bits"])
    return 0


def _cmd_nm_bits(args) -> int:
    _emit("nm_bits_per_weight", pipeline.nm_mask_bits(args.keep, args.group))
    return 0


def _cmd_bench(args) -> int:
    from . import plots

    rows = lutgemm.bench_lut_vs_dense(args.sizes, args.reps, args.seed)
    out_dir = Path(args.out_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / "bench.tsv"
    fig = out_dir / "bench.png"
    _write_tsv(tsv, ("size", "kernel", "median_ns"), rows)
    plots.save_bench_figure(rows, fig)
    _emit("rows", len(rows))
    _emit("table", tsv)
    _emit("figure", fig)
    return 0


def _cmd_transform_fit(args) -> int:
    from . import plots

    w = container.read_weights(args.in_path)
    if args.calib is not None:
        x_calib = container.read_weights(args.calib)
    else:
        rng = np.random.default_rng(args.seed)
        x_calib = rng.standard_normal((args.calib_rows, w.shape[1]))
    cfg = pipeline.FitConfig(
        v=args.v,
        c=args.c,
        arb_iters=args.arb_iters,
        codebook_iters=args.codebook_iters,
    )
    result = pipeline.fit_transform(w, x_calib, cfg)

    out_dir = Path(args.out_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    step = 0
    for value in result.sign_trace:
        rows.append((step, "sign", value))
        step += 1
    for value in result.p_trace[1:]:
        rows.append((step, "factor", value))
        step += 1
    tsv = out_dir / "transform_fit_trace.tsv"
    fig = out_dir / "transform_fit_trace.png"
    layer_path = out_dir / "layer.btcq"
    _write_tsv(tsv, ("step", "phase", "objective"), rows)
    plots.save_trace_figure(rows, fig)

    qcfg = pipeline.QuantizeConfig(
        v=args.v,
        c=args.c,
        arb_iters=args.arb_iters,
        codebook_iters=args.codebook_iters,
    )
    container.write_layer(layer_path, pipeline.btc_quantize(w, result.pair, qcfg))

    _emit("initial_objective", result.initial)
    _emit("final_objective", result.final)
    _emit("sign_flips", result.flips)
    _emit("factor_steps", result.steps)
    _emit("trace", tsv)
    _emit("figure", fig)
    _emit("layer", layer_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btcq",
        description="Sub-1-bit weight compression: binary codebooks over "
        "row-binarized weights, with a table-lookup matmul kernel.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    quant = sub.add_parser("quantize", help="compress a BTCW weight file")
    quant.add_argument("--in", dest="in_path", required=True)
    quant.add_argument("--out", dest="out_path", required=True)
    quant.add_argument("--v", type=int, default=16)
    quant.add_argument("--c", type=int, default=512)
    quant.add_argument("--salient-fraction", type=float, default=0.0)
    quant.add_argument("--split-points", type=int, default=2)
    quant.add_argument("--arb-iters", type=int, default=15)
    quant.add_argument("--codebook-iters", type=int, default=5)
    quant.add_argument("--seed", type=int, default=None)
    quant.add_argument("--threads", type=int, default=1,
                       help="reserved; kernels are currently single-threaded")
    quant.add_argument("--mu-seg", type=int, default=8, choices=(4, 8))
    quant.set_defaults(func=_cmd_quantize)

    deq = sub.add_parser("dequantize", help="reconstruct weights from a .btcq file")
    deq.add_argument("--in", dest="in_path", required=True)
    deq.add_argument("--out", dest="out_path", required=True)
    deq.add_argument("--ref", default=None,
                     help="original BTCW file to report reconstruction MSE against")
    deq.set_defaults(func=_cmd_dequantize)

    stats = sub.add_parser("stats", help="storage accounting for a codebook config")
    stats.add_argument("--v", type=int, required=True)
    stats.add_argument("--c", type=int, required=True)
    stats.add_argument("--rows", type=int, required=True)
    stats.add_argument("--cols", type=int, required=True)
    stats.set_defaults(func=_cmd_stats)

    nm = sub.add_parser("nm-bits", help="bits per weight of an n:m sparsity mask")
    nm.add_argument("--keep", type=int, required=True)
    nm.add_argument("--group", type=int, required=True)
    nm.set_defaults(func=_cmd_nm_bits)

    bench = sub.add_parser("bench", help="time the matmul kernels on synthetic layers")
    bench.add_argument("--out", dest="out_path", required=True,
                       help="directory for bench.tsv and bench.png")
    bench.add_argument("--sizes", type=_parse_sizes, default="4x32x128,4x64x256",
                       help="comma-separated BATCHxROWSxCOLS triples")
    bench.add_argument("--reps", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=_cmd_bench)

    fit = sub.add_parser("transform-fit",
                         help="fit a sign-flip + Kronecker transform for a layer")
    fit.add_argument("--in", dest="in_path", required=True)
    fit.add_argument("--out", dest="out_path", required=True,
                     help="directory for the trace table, figure and fitted layer")
    fit.add_argument("--v", type=int, default=16)
    fit.add_argument("--c", type=int, default=256)
    fit.add_argument("--arb-iters", type=int, default=15)
    fit.add_argument("--codebook-iters", type=int, default=5)
    fit.add_argument("--seed", type=int, default=0,
                     help="seed for the synthetic calibration batch")
    fit.add_argument("--calib-rows", type=int, default=32)
    fit.add_argument("--calib", default=None,
                     help="BTCW file of calibration activations (overrides --seed)")
    fit.set_defaults(func=_cmd_transform_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
