"""Timing harness for dense vs sketched layers and randomized decompositions.

Every ``run_*_bench`` returns a list of :class:`BenchRecord`; write them with
:func:`write_csv`.  Timed regions run with BLAS pinned to one thread unless
``threads`` is given.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .decomp import DecompositionError, cqrrpt, rsvd
from .linalg import frobenius_norm
from .nn import DenseConv2d, DenseLinear, ExactMha, RandMha, SkConv2d, SkLinear, skip_rule_exceeds
from .nn.conv import conv_output_size
from .rng import Stream, derive_seed

__all__ = [
    "BenchRecord",
    "BenchmarkError",
    "UsageError",
    "CSV_COLUMNS",
    "DEFAULT_TRIALS",
    "DEFAULT_WARMUP",
    "time_op",
    "run_linear_bench",
    "run_conv_bench",
    "run_attention_bench",
    "run_decomp_bench",
    "write_csv",
    "read_csv",
]

DEFAULT_TRIALS = 200
DEFAULT_WARMUP = 10

CSV_COLUMNS = (
    "op,impl,d_in,d_out,c_in,c_out,kernel,image,d_model,heads,N,m,l,k,batch,seed,trials,warmup,"
    "mean_ms,std_ms,params_dense,params_sketched,est_mem_bytes,recon_rel_err,orth_err,skipped,skip_reason"
).split(",")

_DTYPES = {"f64": np.float64, "f32": np.float32}


class BenchmarkError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class UsageError(ValueError):
    pass


@dataclass
class BenchRecord:
    op: str
    impl: str
    d_in: int | None = None
    d_out: int | None = None
    c_in: int | None = None
    c_out: int | None = None
    kernel: int | None = None
    image: int | None = None
    d_model: int | None = None
    heads: int | None = None
    N: int | None = None
    m: int | None = None
    l: int | None = None
    k: int | None = None
    batch: int | None = None
    seed: int | None = None
    trials: int | None = None
    warmup: int | None = None
    mean_ms: float | None = None
    std_ms: float | None = None
    params_dense: int | None = None
    params_sketched: int | None = None
    est_mem_bytes: int | None = None
    recon_rel_err: float | None = None
    orth_err: float | None = None
    skipped: bool = False
    skip_reason: str = ""

    def skip(self, reason: str) -> "BenchRecord":
        self.skipped = True
        self.skip_reason = reason
        self.mean_ms = self.std_ms = None
        return self


def _threads(threads: int | None):
    return threadpool_limits(limits=threads or 1)


def time_op(thunk: Callable[[], object], trials: int = DEFAULT_TRIALS, warmup: int = DEFAULT_WARMUP, threads: int | None = 1) -> tuple[float, float]:
    """Mean and sample standard deviation (ms) of ``trials`` timed calls
    after ``warmup`` untimed ones.  ``std_ms`` is 0 when ``trials == 1``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    times = np.empty(trials)
    with _threads(threads):
        for i in range(warmup + trials):
            start = time.perf_counter_ns()
            try:
                thunk()
            except Exception as exc:
                raise BenchmarkError(f"benchmark body failed at iteration {i}: {exc}", iteration=i) from exc
            elapsed = time.perf_counter_ns() - start
            if i >= warmup:
                times[i - warmup] = elapsed / 1e6
    std = float(times.std(ddof=1)) if trials > 1 else 0.0
    return float(times.mean()), std


def _inputs(shape, seed, dtype):
    return Stream(seed).normal(int(np.prod(shape))).reshape(shape).astype(dtype)


def _timed(record: BenchRecord, build: Callable[[], Callable[[], object]], trials, warmup, threads) -> BenchRecord:
    try:
        thunk = build()
        record.mean_ms, record.std_ms = time_op(thunk, trials, warmup, threads)
    except MemoryError:
        record.skip("resource")
    return record


def run_linear_bench(
    d_in: Sequence[int],
    d_out: Sequence[int],
    ls: Sequence[int],
    ks: Sequence[int],
    batch: int = 64,
    trials: int = DEFAULT_TRIALS,
    warmup: int = DEFAULT_WARMUP,
    seed: int = 0,
    dtype: str = "f64",
    threads: int | None = None,
) -> list[BenchRecord]:
    """Dense baseline plus one sketched record per ``(l, k)`` for every shape.

    Pairs with ``2lk(d_in + d_out) > d_in * d_out`` are recorded as skipped.
    ``params_dense`` and ``params_sketched`` are those two weight counts
    (biases excluded, so the columns compare directly).
    """
    dt = _DTYPES[dtype]
    out = []
    for di in d_in:
        for do in d_out:
            common = dict(d_in=di, d_out=do, batch=batch, seed=seed, trials=trials, warmup=warmup)
            dense_params = di * do
            x = None
            try:
                x = _inputs((di, batch), derive_seed(seed, di, do), dt)
            except MemoryError:
                pass
            rec = BenchRecord("linear", "dense", params_dense=dense_params, **common)
            rec.est_mem_bytes = dt(0).itemsize * (dense_params + do + (di + do) * batch)
            if x is None:
                out.append(rec.skip("resource"))
            else:
                def build_dense(di=di, do=do):
                    layer = DenseLinear.init(di, do, seed).astype(dt)
                    return lambda: layer.forward(x)

                out.append(_timed(rec, build_dense, trials, warmup, threads))
            for l in ls:
                for k in ks:
                    rec = BenchRecord("linear", "sketched", l=l, k=k, params_dense=dense_params, **common)
                    rec.params_sketched = 2 * l * k * (di + do)
                    if skip_rule_exceeds(di, do, l, k):
                        out.append(rec.skip("exceeds dense size"))
                        continue
                    if x is None:
                        out.append(rec.skip("resource"))
                        continue

                    def build_sk(di=di, do=do, l=l, k=k, rec=rec):
                        layer = SkLinear.init(di, do, l, k, seed).astype(dt)
                        rec.est_mem_bytes = layer.memory_estimate((di, batch), dt(0).itemsize)
                        return lambda: layer.forward(x)

                    out.append(_timed(rec, build_sk, trials, warmup, threads))
    return out


def run_conv_bench(
    c_in: Sequence[int],
    c_out: Sequence[int],
    kernels: Sequence[int],
    images: Sequence[int],
    ls: Sequence[int],
    ks: Sequence[int],
    batch: int = 1,
    trials: int = DEFAULT_TRIALS,
    warmup: int = DEFAULT_WARMUP,
    seed: int = 0,
    dtype: str = "f64",
    threads: int | None = None,
    padding: int = 0,
) -> list[BenchRecord]:
    """Like :func:`run_linear_bench` for square-kernel convolutions; the skip
    rule uses the lowered input width ``c_in * kernel**2``."""
    dt = _DTYPES[dtype]
    out = []
    for ci in c_in:
        for co in c_out:
            for kern in kernels:
                for img in images:
                    lowered = ci * kern * kern
                    dense_params = lowered * co
                    common = dict(c_in=ci, c_out=co, kernel=kern, image=img, d_in=lowered, d_out=co,
                                  batch=batch, seed=seed, trials=trials, warmup=warmup)
                    shape = (batch, ci, img, img)
                    try:
                        conv_output_size(img, img, kern, kern, 1, padding)
                    except ValueError as exc:
                        raise UsageError(str(exc)) from exc
                    try:
                        x = _inputs(shape, derive_seed(seed, ci, co, kern, img), dt)
                    except MemoryError:
                        x = None
                    rec = BenchRecord("conv2d", "dense", params_dense=dense_params, **common)
                    probe = DenseConv2d(np.zeros((co, ci, kern, kern)), padding=padding) if x is not None else None
                    if probe is not None:
                        rec.est_mem_bytes = probe.memory_estimate(shape, dt(0).itemsize)
                        del probe

                        def build_dense(ci=ci, co=co, kern=kern):
                            layer = DenseConv2d.init(ci, co, kern, 1, padding, seed).astype(dt)
                            return lambda: layer.forward(x)

                        out.append(_timed(rec, build_dense, trials, warmup, threads))
                    else:
                        out.append(rec.skip("resource"))
                    for l in ls:
                        for k in ks:
                            rec = BenchRecord("conv2d", "sketched", l=l, k=k, params_dense=dense_params, **common)
                            rec.params_sketched = 2 * l * k * (lowered + co)
                            if skip_rule_exceeds(lowered, co, l, k):
                                out.append(rec.skip("exceeds dense size"))
                                continue
                            if x is None:
                                out.append(rec.skip("resource"))
                                continue

                            def build_sk(ci=ci, co=co, kern=kern, l=l, k=k, rec=rec):
                                layer = SkConv2d.init(ci, co, kern, l, k, 1, padding, seed).astype(dt)
                                rec.est_mem_bytes = layer.memory_estimate(shape, dt(0).itemsize)
                                return lambda: layer.forward(x)

                            out.append(_timed(rec, build_sk, trials, warmup, threads))
    return out


def run_attention_bench(
    d_model: Sequence[int],
    heads: Sequence[int],
    features: Sequence[int],
    kernels: Sequence[str],
    seqlens: Sequence[int],
    trials: int = DEFAULT_TRIALS,
    warmup: int = DEFAULT_WARMUP,
    seed: int = 0,
    mem_budget: int | None = None,
    dtype: str = "f64",
    threads: int | None = None,
) -> list[BenchRecord]:
    """Exact vs random-feature attention.

    Rows whose analytic memory estimate exceeds ``mem_budget`` bytes are
    recorded as skipped with reason ``memory-budget`` instead of being run.
    Random-feature rows carry the feature kernel in ``op``
    (``attention:softmax`` / ``attention:relu``).
    """
    dt = _DTYPES[dtype]
    width = dt(0).itemsize
    out = []
    for d in d_model:
        for h in heads:
            if d % h:
                raise UsageError(f"d_model {d} is not divisible by heads {h}")
            for n in seqlens:
                x = _inputs((n, d), derive_seed(seed, d, h, n), dt)
                exact = ExactMha.init(d, h, seed).astype(dt)
                common = dict(d_model=d, heads=h, N=n, seed=seed, trials=trials, warmup=warmup,
                              params_dense=exact.param_count().total_stored)
                rec = BenchRecord("attention", "dense", **common)
                rec.est_mem_bytes = exact.memory_estimate((n, d), width)
                if mem_budget is not None and rec.est_mem_bytes > mem_budget:
                    out.append(rec.skip("memory-budget"))
                else:
                    out.append(_timed(rec, lambda exact=exact, x=x: (lambda: exact.forward(x)), trials, warmup, threads))
                for kern in kernels:
                    for m in features:
                        layer = RandMha.from_exact(exact, m, kern, seed=derive_seed(seed, m)).astype(dt)
                        if n == 1:
                            # without the eps stabilizer a single token attends only to itself
                            check = RandMha.from_exact(exact, m, kern, seed=derive_seed(seed, m), eps=0.0)
                            if not np.allclose(check.forward(x), exact.forward(x), rtol=1e-6, atol=1e-9):
                                raise BenchmarkError("single-token outputs of exact and random-feature attention differ")
                        rec = BenchRecord(f"attention:{kern}", "sketched", m=m, **common)
                        rec.params_sketched = layer.param_count().total_stored
                        rec.est_mem_bytes = layer.memory_estimate((n, d), width)
                        if mem_budget is not None and rec.est_mem_bytes > mem_budget:
                            out.append(rec.skip("memory-budget"))
                            continue
                        out.append(_timed(rec, lambda layer=layer, x=x: (lambda: layer.forward(x)), trials, warmup, threads))
    return out


def _orth_err(q: np.ndarray) -> float:
    return frobenius_norm(q.T @ q - np.eye(q.shape[1]))


def run_decomp_bench(
    kind: str,
    rows: int,
    cols: int,
    rank: int | None = None,
    gamma: float = 4.0,
    oversample: int = 8,
    power_iters: int = 1,
    trials: int = DEFAULT_TRIALS,
    warmup: int = DEFAULT_WARMUP,
    seed: int = 0,
    threads: int | None = None,
) -> list[BenchRecord]:
    """Time one decomposition and record its residuals.

    The test matrix is Gaussian, or an exact rank-``rank`` product of two
    Gaussian factors when ``rank < min(rows, cols)``.  In the record,
    ``d_out``/``d_in`` hold rows/cols and ``k`` the target rank.
    """
    if kind not in ("rsvd", "cqrrpt"):
        raise UsageError(f"unknown decomposition {kind!r}")
    if rows < 1 or cols < 1:
        raise UsageError("rows and cols must be positive")
    if kind == "cqrrpt" and rows < math.ceil(gamma * cols):
        raise UsageError(f"cqrrpt needs a tall input: rows >= ceil(gamma*cols) = {math.ceil(gamma * cols)}")
    p = min(rows, cols)
    rank = p if rank is None else rank
    if not 1 <= rank <= p:
        raise UsageError(f"rank must lie in [1, {p}]")
    s = Stream(derive_seed(seed, rows, cols, rank))
    if rank < p:
        a = s.normal(rows * rank).reshape(rows, rank) @ s.normal(rank * cols).reshape(rank, cols)
    else:
        a = s.normal(rows * cols).reshape(rows, cols)
    rec = BenchRecord(kind, "sketched", d_in=cols, d_out=rows, k=rank, seed=seed, trials=trials, warmup=warmup)
    rec.est_mem_bytes = 8 * a.size
    na = frobenius_norm(a)
    if kind == "rsvd":
        over = min(oversample, p - rank)

        def run():
            return rsvd(a, rank, over, power_iters, seed)

        try:
            res = run()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        rec.recon_rel_err = frobenius_norm(a - res.reconstruct()) / na
        rec.orth_err = max(_orth_err(res.u), _orth_err(res.v))
    else:

        def run():
            return cqrrpt(a, gamma, 1e-10, seed)

        try:
            res = run()
        except DecompositionError as exc:
            return [rec.skip(f"decomposition-failure: {exc}")]
        rec.recon_rel_err = frobenius_norm(a[:, res.pivots] - res.q @ res.r_mat) / na
        rec.orth_err = _orth_err(res.q)
    rec.mean_ms, rec.std_ms = time_op(run, trials, warmup, threads)
    return [rec]


def _fmt(name: str, value) -> str:
    if value is None:
        return ""
    if name == "skipped":
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_csv(records: Iterable[BenchRecord], path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for rec in records:
                row = asdict(rec)
                w.writerow([_fmt(c, row[c]) for c in CSV_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[BenchRecord]:
    """Parse a file produced by :func:`write_csv` back into records."""
    types = {f.name: f.type for f in fields(BenchRecord)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name, text in row.items():
                t = str(types[name])
                if name == "skipped":
                    kw[name] = text == "true"
                elif text == "":
                    kw[name] = "" if name == "skip_reason" else None
                elif t.startswith("int"):
                    kw[name] = int(text)
                elif t.startswith("float"):
                    kw[name] = float(text)
                else:
                    kw[name] = text
            out.append(BenchRecord(**kw))
    return out
