"""Command-line entry point.

Standard output carries tab-separated records; notes go to standard error.
Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from wnq.backward import MarginError, backward_lqnet, backward_wnq, fd_deviations, max_abs_margin
from wnq.baselines import MethodId, quantize_layer
from wnq.metrics import DEFAULT_BINS, distribution_report, format_layer_record
from wnq.quantizer import QuantConfig, quantize_filter
from wnq.tensor_store import (
    QUANT_MAGIC,
    TENSOR_MAGIC,
    FormatError,
    LayerKind,
    WeightTensor,
    read_quantized,
    read_tensor,
    sniff,
    write_quantized,
    write_tensor,
)
from wnq.train import Dataset, TrainConfig, TrainingDiverged, pretrain, run_experiment, with_method

QUANT_METHODS = ("wnq", "lqnet", "residual", "dorefa")
TRAIN_METHODS = ("fp",) + QUANT_METHODS


def _bits(text: str) -> int:
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid bit-width {text!r}") from None
    if not 1 <= k <= 8:
        raise argparse.ArgumentTypeError(f"bit-width must be in [1, 8], got {k}")
    return k


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _nonneg_int(text: str) -> int:
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _positive_float(text: str) -> float:
    x = float(text)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return x


def note(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- quantize / dequantize / stats -----------------------------------------------


def cmd_quantize(args) -> int:
    t = read_tensor(args.input)
    config = QuantConfig(bits=args.bits, init_iters=args.iters, tol=args.tol)
    lq = quantize_layer(t, MethodId(args.method), config)
    if lq.rows is None:
        write_tensor(lq.to_tensor(), args.output)
    else:
        write_quantized(lq.to_quantized_layer(), args.output)
    report = distribution_report(t, lq.method, args.bits, quantized=lq, name=Path(args.input).stem)
    print(format_layer_record(report))
    return 0


def cmd_dequantize(args) -> int:
    layer = read_quantized(args.input)
    rows = layer.dequantize()
    if args.like:
        ref = read_tensor(args.like)
        if ref.num_filters != layer.num_filters or ref.filter_size != layer.filter_size:
            raise ValueError(f"--like shape {ref.shape} does not match N={layer.num_filters} M={layer.filter_size}")
        shape = ref.shape
    elif layer.kind is LayerKind.Conv:
        shape = (layer.num_filters, layer.filter_size, 1, 1)
        note(f"note: conv kernel shape not stored in WNQQ; writing {shape} (pass --like to restore it)")
    else:
        shape = (layer.num_filters, layer.filter_size)
    write_tensor(WeightTensor(shape, rows.reshape(-1), layer.kind), args.output)
    return 0


def cmd_stats(args) -> int:
    t = read_tensor(args.input)
    quantized = None
    method = MethodId(args.method) if args.method else None
    if args.quantized:
        magic = sniff(args.quantized)
        if magic == QUANT_MAGIC:
            quantized = read_quantized(args.quantized)
        elif magic == TENSOR_MAGIC:
            quantized = read_tensor(args.quantized)
        else:
            raise FormatError(f"{args.quantized}: not a WNQT or WNQQ file")
        qn = quantized.num_filters
        qm = quantized.filter_size
        if (qn, qm) != (t.num_filters, t.filter_size):
            raise ValueError(f"shape mismatch: {args.input} is {t.num_filters}x{t.filter_size}, {args.quantized} is {qn}x{qm}")
    if quantized is None:
        method = None
    report = distribution_report(t, method, None, quantized=quantized, bins=args.bins, name=Path(args.input).stem)
    print(format_layer_record(report))
    return 0


# -- gradcheck ----------------------------------------------------------------------


def gradcheck_vector(rng: np.random.Generator, m: int, eps: float) -> np.ndarray:
    """Standard-normal vector whose max-abs element is pushed clear of the runner-up."""
    w = rng.standard_normal(m)
    if m > 1 and max_abs_margin(w) <= 10 * eps:
        i = int(np.argmax(np.abs(w)))
        second = np.sort(np.abs(w))[-2]
        w[i] = np.copysign(second + 20 * eps, w[i])
    return w


def cmd_gradcheck(args) -> int:
    failures = 0
    worst = 0.0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        w = gradcheck_vector(rng, args.m, args.eps)
        g = rng.standard_normal(args.m)
        _, ctx = quantize_filter(w, QuantConfig(bits=args.k))
        try:
            dev = fd_deviations(w, g, args.eps)
        except MarginError as exc:
            print(f"gradcheck\t{seed}\tNA\treject\t{exc}")
            failures += 1
            continue
        diff = np.flatnonzero(backward_wnq(ctx, g) != backward_lqnet(ctx, g))
        bad = np.flatnonzero(dev >= args.tol)
        stray = [int(i) for i in diff if i != ctx.max_index]
        ok = bad.size == 0 and not stray
        worst = max(worst, float(dev.max()))
        failures += not ok
        detail = ",".join(str(int(i)) for i in bad) or "-"
        if stray:
            detail += ";stray=" + ",".join(map(str, stray))
        print(f"gradcheck\t{seed}\t{float(dev.max())!r}\t{'pass' if ok else 'fail'}\t{detail}")
    note(f"gradcheck: {args.seeds - failures}/{args.seeds} passed, worst deviation {worst:.3g} (tol {args.tol:g})")
    return 0 if failures == 0 else 1


# -- training -------------------------------------------------------------------------


def _train_config(args, method: str) -> TrainConfig:
    return TrainConfig(
        method=method,
        bits=args.bits,
        lr=args.lr,
        momentum=args.momentum,
        steps=args.steps,
        batch=args.batch,
        seed=args.seed,
        dataset=args.dataset,
        input_dim=args.input_dim,
        hidden=args.hidden,
        arch=args.arch,
        pretrain_steps=args.pretrain_steps,
        pretrain_lr=args.pretrain_lr,
        weight_decay=args.weight_decay,
        init_iters=args.iters,
    )


def _write_run(result, out_dir: Path, prefix: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{prefix}log.tsv").write_text(result.log_text())
    net = result.net
    for layer in net.param_layers:
        write_tensor(WeightTensor.from_array(layer.weight, layer.kind), out_dir / f"{prefix}{layer.name}.wnqt")
        if net.method is MethodId.Fp:
            continue
        lq = net.quantize(layer, update=False)
        if lq.rows is None:
            write_tensor(lq.to_tensor(), out_dir / f"{prefix}{layer.name}.q.wnqt")
        else:
            write_quantized(lq.to_quantized_layer(), out_dir / f"{prefix}{layer.name}.wnqq")


def cmd_demo_train(args) -> int:
    config = _train_config(args, args.method)
    result = run_experiment(config)
    _write_run(result, Path(args.out_dir))
    for report in result.reports.values():
        print(format_layer_record(report))
    note(f"demo-train {config.method.value}: final accuracy {result.accuracy:.4f}, log in {args.out_dir}")
    return 0


def summary_header(layers) -> str:
    cols = ["method", "seed", "accuracy"]
    for name in layers:
        cols += [f"{name}_relative_mse", f"{name}_tail_ratio"]
    return "\t".join(cols)


def summary_row(result) -> str:
    def fmt(x):
        return "NA" if x is None else repr(float(x))

    cols = [result.config.method.value, str(result.config.seed), fmt(result.accuracy)]
    for report in result.reports.values():
        cols += [fmt(report.relative_mse), fmt(report.tail_ratio)]
    return "\t".join(cols)


def cmd_compare(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = _train_config(args, "wnq")
    rows = []
    results = {}
    for seed in range(args.seed, args.seed + args.seeds):
        cfg = TrainConfig(**{**base.__dict__, "seed": seed})
        net = pretrain(cfg)
        for method in ("wnq", "lqnet"):
            result = run_experiment(with_method(cfg, method), net)
            results[(method, seed)] = result
            _write_run(result, out_dir / f"{method}_seed{seed}")
    first = next(iter(results.values()))
    header = summary_header(first.reports)
    for method in ("wnq", "lqnet"):
        for seed in range(args.seed, args.seed + args.seeds):
            rows.append(summary_row(results[(method, seed)]))
    text = header + "\n" + "\n".join(rows) + "\n"
    (out_dir / "summary.tsv").write_text(text)
    sys.stdout.write(text)
    wins = sum(
        results[("wnq", s)].reports[name].relative_mse < results[("lqnet", s)].reports[name].relative_mse
        for s in range(args.seed, args.seed + args.seeds)
        for name in first.reports
    )
    note(f"compare: WNQ has lower relative mse on {wins}/{args.seeds * len(first.reports)} layer x seed pairs")
    return 0


# -- parser --------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, single: bool) -> None:
    p.add_argument("--bits", type=_bits, default=2, help="bit-width K (default 2)")
    p.add_argument("--steps", type=_nonneg_int, default=2000, help="quantized training steps (default 2000)")
    p.add_argument("--out-dir", required=True, help="directory for logs and weight files")
    p.add_argument("--pretrain-steps", type=_nonneg_int, default=2000, help="full-precision steps before fine-tuning (default 2000)")
    p.add_argument("--lr", type=_positive_float, default=0.01, help="fine-tuning learning rate (default 0.01)")
    p.add_argument("--pretrain-lr", type=_positive_float, default=0.1, help="pretraining learning rate (default 0.1)")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    p.add_argument("--weight-decay", type=float, default=0.0, help="L2 weight decay (default 0)")
    p.add_argument("--batch", type=_positive_int, default=64, help="batch size (default 64)")
    p.add_argument("--dataset", choices=[d.value for d in Dataset], default="blobs", help="synthetic dataset (default blobs)")
    p.add_argument("--input-dim", type=_positive_int, default=TrainConfig.input_dim, help=f"blob dimension (default {TrainConfig.input_dim})")
    p.add_argument("--hidden", type=_positive_int, default=32, help="hidden width or conv channels (default 32)")
    p.add_argument("--arch", choices=["mlp", "conv"], default="mlp", help="network (default mlp)")
    p.add_argument("--iters", type=_positive_int, default=20, help="alternating iterations at initialization (default 20)")
    if single:
        p.add_argument("--method", choices=TRAIN_METHODS, default="wnq", help="quantizer (default wnq)")
        p.add_argument("--seed", type=_nonneg_int, default=0, help="run seed (default 0)")
    else:
        p.add_argument("--seeds", type=_positive_int, default=5, help="number of matched seeds (default 5)")
        p.add_argument("--seed", type=_nonneg_int, default=0, help="first seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wnq", description="Weight normalization based quantization tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize a WNQT tensor")
    p.add_argument("--input", required=True, help="input WNQT file")
    p.add_argument("--output", required=True, help="output WNQQ file (WNQT for dorefa)")
    p.add_argument("--bits", type=_bits, default=2, help="bit-width K in [1, 8] (default 2)")
    p.add_argument("--method", choices=QUANT_METHODS, default="wnq", help="quantizer (default wnq)")
    p.add_argument("--iters", type=_positive_int, default=20, help="alternating iterations (default 20)")
    p.add_argument("--tol", type=float, default=1e-8, help="stop when the objective decreases less than this (default 1e-8)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", help="expand a WNQQ file to a WNQT tensor")
    p.add_argument("--input", required=True, help="input WNQQ file")
    p.add_argument("--output", required=True, help="output WNQT file")
    p.add_argument("--like", help="WNQT file whose shape to reuse (conv layers)")
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("stats", help="emit a layer report record")
    p.add_argument("--input", required=True, help="float WNQT tensor")
    p.add_argument("--quantized", help="WNQQ or WNQT file to measure relative mse against")
    p.add_argument("--method", choices=TRAIN_METHODS, help="method label for the record (default NA)")
    p.add_argument("--bins", type=_positive_int, default=DEFAULT_BINS, help=f"histogram bins (default {DEFAULT_BINS})")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of the WNQ backward")
    p.add_argument("--m", type=_positive_int, default=8, help="filter size (default 8)")
    p.add_argument("--k", type=_bits, default=2, help="bit-width of the quantizer producing the context (default 2)")
    p.add_argument("--seeds", type=_positive_int, default=100, help="number of random vectors (default 100)")
    p.add_argument("--eps", type=_positive_float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--tol", type=_positive_float, default=1e-4, help="max allowed deviation (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo-train", help="train one seeded tiny network")
    _add_train_flags(p, single=True)
    p.set_defaults(func=cmd_demo_train)

    p = sub.add_parser("compare", help="WNQ vs LQ-Net on matched seeds")
    _add_train_flags(p, single=False)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.func(args)
    except (OSError, FormatError, ValueError, TrainingDiverged) as exc:
        print(f"wnq {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
