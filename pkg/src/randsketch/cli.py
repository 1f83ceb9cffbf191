"""Command-line driver: ``randsketch bench ...``, ``randsketch tune ...``,
``randsketch model inspect ...``.

Exit codes: 0 success, 1 usage error, 2 runtime or benchmark error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings

import numpy as np

from . import bench
from .nn import Model, ModelFormatError, model_load, model_save
from .nn.model import read_manifest
from .tuner import (
    AutoTuner,
    GridSearch,
    LayerConfig,
    NoFeasibleConfigError,
    RandomSearch,
    SelectionError,
    UnsketchableLayerWarning,
    parse_selector,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _strs(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def _pairs(text: str):
    if text == "auto":
        return "auto"
    try:
        out = []
        for item in text.split(","):
            l, k = item.split(":")
            out.append((int(l), int(k)))
        return tuple(out)
    except ValueError:
        raise argparse.ArgumentTypeError("--params takes 'auto' or a list like 1:8,2:16")


def _selector(text: str):
    try:
        return parse_selector(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _protocol(p):
    p.add_argument("--trials", type=int, default=bench.DEFAULT_TRIALS,
                   help=f"timed repetitions per configuration (default {bench.DEFAULT_TRIALS})")
    p.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP,
                   help=f"untimed warmup calls (default {bench.DEFAULT_WARMUP})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="BLAS threads inside timed regions (default 1)")
    p.add_argument("--out", required=True, help="CSV output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="randsketch", description="Sketched layers: benchmarks, tuning and model files.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="time dense vs sketched operators")
    bsub = b.add_subparsers(dest="workload", required=True, parser_class=_Parser)

    lin = bsub.add_parser("linear")
    lin.add_argument("--din", type=_ints, required=True)
    lin.add_argument("--dout", type=_ints, required=True)
    lin.add_argument("--l", type=_ints, default=[1, 2, 3])
    lin.add_argument("--k", type=_ints, default=[16, 32, 64, 128, 256, 512])
    lin.add_argument("--batch", type=int, default=64)
    lin.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    _protocol(lin)

    conv = bsub.add_parser("conv")
    conv.add_argument("--cin", type=_ints, required=True)
    conv.add_argument("--cout", type=_ints, required=True)
    conv.add_argument("--kernel", type=_ints, default=[3])
    conv.add_argument("--image", type=_ints, default=[64])
    conv.add_argument("--l", type=_ints, default=[1, 2, 3])
    conv.add_argument("--k", type=_ints, default=[8, 16, 32])
    conv.add_argument("--batch", type=int, default=1)
    conv.add_argument("--padding", type=int, default=0)
    conv.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    _protocol(conv)

    att = bsub.add_parser("attention")
    att.add_argument("--dmodel", type=_ints, required=True)
    att.add_argument("--heads", type=_ints, required=True)
    att.add_argument("--features", type=_ints, default=[64, 128, 256])
    att.add_argument("--kernel", type=_strs, default=["softmax", "relu"])
    att.add_argument("--seqlen", type=_ints, required=True)
    att.add_argument("--mem-budget", type=int, default=None, help="skip rows whose estimated bytes exceed this")
    att.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    _protocol(att)

    dec = bsub.add_parser("decomp")
    dec.add_argument("--kind", choices=["rsvd", "cqrrpt"], required=True)
    dec.add_argument("--rows", type=int, required=True)
    dec.add_argument("--cols", type=int, required=True)
    dec.add_argument("--rank", type=int, default=None)
    dec.add_argument("--gamma", type=float, default=4.0)
    dec.add_argument("--oversample", type=int, default=8)
    dec.add_argument("--power-iters", type=int, default=1)
    _protocol(dec)

    t = sub.add_parser("tune", help="search sketch hyperparameters for a saved model")
    t.add_argument("--model", required=True, help="model manifest path")
    t.add_argument("--data", required=True, help=".npz with held-out 'x' (samples x features) and 'y' (labels)")
    t.add_argument("--select", type=_selector, required=True, help="type:Linear | pattern:<regex> | names:a,b")
    t.add_argument("--params", type=_pairs, default="auto")
    t.add_argument("--metric", choices=["loss", "accuracy"], default="loss")
    t.add_argument("--threshold", type=float, required=True)
    t.add_argument("--higher-is-better", action="store_true",
                   help="metric must be >= threshold (default: <= threshold)")
    t.add_argument("--objective", choices=["params", "time"], default="params",
                   help="minimized objective: total stored coefficients or forward time")
    t.add_argument("--search", choices=["random", "grid"], default="random")
    t.add_argument("--n-trials", type=int, default=10)
    t.add_argument("--joint", action="store_true", help="search all selected layers jointly (default: one at a time)")
    t.add_argument("--fresh-init", action="store_true", help="do not copy dense weights into sketched layers")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-model", default=None)
    t.add_argument("--report", default=None)

    m = sub.add_parser("model", help="model file utilities")
    msub = m.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ins = msub.add_parser("inspect")
    ins.add_argument("path")
    return parser


def _run_bench(args) -> int:
    w = args.workload
    if args.trials < 1 or args.warmup < 0:
        raise bench.UsageError("--trials must be >= 1 and --warmup >= 0")
    if w == "linear":
        recs = bench.run_linear_bench(args.din, args.dout, args.l, args.k, args.batch, args.trials,
                                      args.warmup, args.seed, args.dtype, args.threads)
    elif w == "conv":
        recs = bench.run_conv_bench(args.cin, args.cout, args.kernel, args.image, args.l, args.k, args.batch,
                                    args.trials, args.warmup, args.seed, args.dtype, args.threads, args.padding)
    elif w == "attention":
        for kern in args.kernel:
            if kern not in ("softmax", "relu"):
                raise bench.UsageError(f"unknown attention kernel {kern!r}")
        recs = bench.run_attention_bench(args.dmodel, args.heads, args.features, args.kernel, args.seqlen,
                                         args.trials, args.warmup, args.seed, args.mem_budget, args.dtype, args.threads)
    else:
        recs = bench.run_decomp_bench(args.kind, args.rows, args.cols, args.rank, args.gamma, args.oversample,
                                      args.power_iters, args.trials, args.warmup, args.seed, args.threads)
    bench.write_csv(recs, args.out)
    print(f"wrote {len(recs)} records to {args.out}")
    return EXIT_OK


def heldout_loss(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of ``model`` on columns of ``x``.

    One output row is read as a logit for class 1; several rows as class
    logits.
    """
    z = model.forward(x)
    y = np.asarray(y).astype(int)
    if z.shape[0] == 1:
        t = z[0]
        return float(np.mean(np.logaddexp(0.0, t) - y * t))
    z = z - z.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    return float(-np.mean(logp[y, np.arange(y.size)]))


def heldout_accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    z = model.forward(x)
    pred = (z[0] > 0).astype(int) if z.shape[0] == 1 else np.argmax(z, axis=0)
    return float(np.mean(pred == np.asarray(y).astype(int)))


def _run_tune(args) -> int:
    model = model_load(args.model)
    with np.load(args.data) as data:
        if "x" not in data or "y" not in data:
            raise bench.UsageError(f"{args.data} must contain arrays 'x' and 'y'")
        x = np.ascontiguousarray(np.asarray(data["x"], dtype=np.float64).T)
        y = np.asarray(data["y"])
    metric = heldout_loss if args.metric == "loss" else heldout_accuracy

    def accuracy_eval(m):
        return metric(m, x, y)

    if args.objective == "params":
        def objective_eval(m):
            return float(m.param_count().total_stored)
    else:
        def objective_eval(m):
            return bench.time_op(lambda: m.forward(x), trials=5, warmup=1)[0]

    algo = GridSearch(seed=args.seed) if args.search == "grid" else RandomSearch(args.n_trials, args.seed)
    config = LayerConfig(args.select, args.params, separate=not args.joint,
                         copy_weights=not args.fresh_init)
    tuner = AutoTuner(model, [config], accuracy_eval, args.threshold, objective_eval,
                      higher_is_better=args.higher_is_better, minimize_objective=True,
                      algo=algo, master_seed=args.seed)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnsketchableLayerWarning)  # reported below instead
        results = tuner.tune()
    if args.report:
        tuner.report(args.report)
    baseline = accuracy_eval(model)
    print(f"{len(results)} trials in {time.perf_counter() - start:.1f}s; dense {args.metric} = {baseline:.6g}")
    for s in tuner.skipped:
        print(f"skipped {s['layer']}: {s['reason']}")
    best = tuner.best_trial()
    before = model.param_count().total_stored
    print(f"best trial {best.trial_index}: {best.assignment} {args.metric}={best.accuracy:.6g} "
          f"objective={best.objective:.6g} total_stored {before} -> {best.total_stored}")
    if args.out_model:
        model_save(tuner.apply_best_params(), args.out_model)
        print(f"saved {args.out_model}")
    return EXIT_OK


def _run_model(args) -> int:
    manifest = read_manifest(args.path)
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "bench":
            return _run_bench(args)
        if args.command == "tune":
            return _run_tune(args)
        return _run_model(args)
    except (bench.UsageError, SelectionError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (bench.BenchmarkError, NoFeasibleConfigError, ModelFormatError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
