"""Constrained search over sketching hyperparameters.

The tuner finds the dense linear / conv layers of a :class:`Model` selected
by a :class:`LayerConfig`, tries ``(num_terms, low_rank)`` assignments for
them, scores every candidate model with two user callbacks (an accuracy
metric with a threshold and an objective such as latency or size) and
returns every trial.  :func:`best_params` picks the best assignment that
satisfies the threshold.

Example::

    tuner = AutoTuner(
        model,
        [LayerConfig(ByType("DenseLinear"), params="auto", separate=True)],
        accuracy_eval=heldout_loss, threshold=0.3, higher_is_better=False,
        objective_eval=lambda m: m.param_count().total_stored,
        algo=RandomSearch(n_trials=10, seed=0),
    )
    tuner.tune()
    smaller = tuner.apply_best_params()
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import re
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

from .nn import DenseConv2d, DenseLinear, Layer, Model, SkConv2d, SkLinear
from .rng import Stream, derive_seed

__all__ = [
    "ByType",
    "ByNames",
    "ByPattern",
    "LayerConfig",
    "GridSearch",
    "RandomSearch",
    "TrialResult",
    "SelectionError",
    "NoFeasibleConfigError",
    "ApplicationError",
    "UnsketchableLayerWarning",
    "AUTO_L",
    "AUTO_K",
    "match_layers",
    "auto_search_space",
    "sketch_layer",
    "tune",
    "best_trial",
    "best_params",
    "apply_best_params",
    "write_report",
    "parse_selector",
    "AutoTuner",
]

log = logging.getLogger(__name__)

AUTO_L = (1, 2, 3)
AUTO_K = (8, 16, 32, 64, 128, 256, 512)

# "Linear" / "Conv2d" are accepted as aliases for the dense kinds
_TYPE_ALIASES = {"linear": "DenseLinear", "conv2d": "DenseConv2d", "conv": "DenseConv2d"}


class SelectionError(LookupError):
    pass


class NoFeasibleConfigError(RuntimeError):
    pass


class ApplicationError(ValueError):
    pass


class UnsketchableLayerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ByType:
    kind: str

    def resolved(self) -> str:
        return _TYPE_ALIASES.get(self.kind.lower(), self.kind)


@dataclass(frozen=True)
class ByNames:
    names: tuple[str, ...]

    def __init__(self, names):
        object.__setattr__(self, "names", tuple(names))


@dataclass(frozen=True)
class ByPattern:
    pattern: str


Selector = Union[ByType, ByNames, ByPattern]


@dataclass(frozen=True)
class LayerConfig:
    selector: Selector
    params: Union[str, tuple] = "auto"
    separate: bool = True
    copy_weights: bool = True

    def __post_init__(self):
        if self.params != "auto":
            object.__setattr__(self, "params", tuple((int(l), int(k)) for l, k in self.params))


def parse_selector(text: str) -> Selector:
    """``type:Linear``, ``pattern:<regex>`` or ``names:a,b,c``."""
    kind, _, value = text.partition(":")
    if not value:
        raise ValueError(f"selector {text!r} must look like type:..., pattern:... or names:...")
    if kind == "type":
        return ByType(value)
    if kind == "pattern":
        return ByPattern(value)
    if kind == "names":
        return ByNames([v for v in value.split(",") if v])
    raise ValueError(f"unknown selector kind {kind!r}")


@dataclass(frozen=True)
class GridSearch:
    """Every point of the space.  Joint spaces larger than ``max_points``
    are randomly sampled down to ``max_points`` draws."""

    max_points: int = 10_000
    seed: int = 0


@dataclass(frozen=True)
class RandomSearch:
    """``n_trials`` uniform draws (with replacement) from the space."""

    n_trials: int = 10
    seed: int = 0


@dataclass
class TrialResult:
    trial_index: int
    assignment: dict  # layer name -> (l, k)
    accuracy: float
    objective: float
    satisfied: bool
    total_stored: int = 0
    wall_ms: float = 0.0
    seeds: dict = field(default_factory=dict)
    error: str | None = None
    copy_weights: bool = True

    @property
    def failed(self) -> bool:
        return self.error is not None


def match_layers(model: Model, config: LayerConfig | Selector) -> list[str]:
    selector = config.selector if isinstance(config, LayerConfig) else config
    if len(model) == 0:
        raise SelectionError("model has no layers")
    if isinstance(selector, ByType):
        kind = selector.resolved()
        found = [n for n, layer in model if layer.kind == kind]
    elif isinstance(selector, ByPattern):
        rx = re.compile(selector.pattern)
        found = [n for n, _ in model if rx.fullmatch(n)]
    elif isinstance(selector, ByNames):
        present = set(model.names())
        missing = [n for n in selector.names if n not in present]
        if missing:
            raise SelectionError(f"{selector!r}: no layers named {missing}")
        wanted = set(selector.names)
        found = [n for n in model.names() if n in wanted]
    else:
        raise TypeError(f"not a selector: {selector!r}")
    if not found:
        raise SelectionError(f"{selector!r} matched no layers")
    return found


def _lowered_dims(layer: Layer) -> tuple[int, int]:
    if isinstance(layer, DenseLinear):
        return layer.d_in, layer.d_out
    if isinstance(layer, DenseConv2d):
        return layer.c_in * layer.kernel_h * layer.kernel_w, layer.c_out
    raise ApplicationError(f"{layer.kind} layers cannot be sketched")


def _sketched_total(d_in: int, d_out: int, l: int, k: int) -> int:
    return 2 * l * k * (d_in + d_out) + d_out


def auto_search_space(layer: Layer, ls=AUTO_L, ks=AUTO_K) -> list[tuple[int, int]]:
    """Admissible ``(l, k)`` pairs, cheapest first.

    A pair is admitted when ``2lk(d_in + d_out) <= d_in * d_out``.  An empty
    list means the layer is too small to sketch profitably.
    """
    d_in, d_out = _lowered_dims(layer)
    pairs = [(l, k) for l in ls for k in ks if 2 * l * k * (d_in + d_out) <= d_in * d_out]
    return sorted(pairs, key=lambda p: (_sketched_total(d_in, d_out, *p), p))


def sketch_layer(layer: Layer, l: int, k: int, seed: int, copy_weights: bool = True) -> Layer:
    """Sketched replacement for a dense linear or conv layer."""
    if isinstance(layer, DenseLinear):
        if copy_weights:
            return SkLinear.from_dense(layer.weight, layer.bias, l, k, seed)
        return SkLinear.init(layer.d_in, layer.d_out, l, k, seed)
    if isinstance(layer, DenseConv2d):
        if copy_weights:
            return SkConv2d.from_dense(layer, l, k, seed)
        out = SkConv2d.init(layer.c_in, layer.c_out, (layer.kernel_h, layer.kernel_w), l, k, layer.stride, layer.padding, seed)
        return out
    if isinstance(layer, (SkLinear, SkConv2d)):
        raise ApplicationError(f"layer is already sketched ({layer.kind})")
    raise ApplicationError(f"{layer.kind} layers cannot be sketched")


def _draw(space_sizes: Sequence[int], algo, salt: int) -> list[tuple[int, ...]]:
    """Index tuples into a (possibly joint) space."""
    total = math.prod(space_sizes)
    if isinstance(algo, GridSearch) and total <= algo.max_points:
        return list(itertools.product(*(range(s) for s in space_sizes)))
    if isinstance(algo, GridSearch):
        n, seed = algo.max_points, algo.seed
        log.warning("joint grid of %d points exceeds %d; sampling randomly", total, n)
    elif isinstance(algo, RandomSearch):
        n, seed = algo.n_trials, algo.seed
    else:
        raise TypeError(f"unknown search algorithm {algo!r}")
    stream = Stream(derive_seed(seed, salt))
    cols = [stream.integers(n, s) for s in space_sizes]
    return [tuple(int(c[i]) for c in cols) for i in range(n)]


def _plan(model: Model, configs: Sequence[LayerConfig], algo, skipped: list | None):
    """List of (assignment, copy_weights) in trial order."""
    plan = []
    for ci, cfg in enumerate(configs):
        names = match_layers(model, cfg)
        spaces = {}
        for name in names:
            layer = model[name]
            if isinstance(layer, (SkLinear, SkConv2d)):
                raise ApplicationError(f"layer {name!r} is already sketched")
            space = auto_search_space(layer) if cfg.params == "auto" else list(cfg.params)
            if not space:
                msg = f"layer {name!r} is too small to sketch profitably; skipped"
                warnings.warn(msg, UnsketchableLayerWarning, stacklevel=3)
                if skipped is not None:
                    skipped.append({"layer": name, "reason": "unsketchable"})
                continue
            spaces[name] = space
        if not spaces:
            continue
        if cfg.separate:
            for li, (name, space) in enumerate(spaces.items()):
                for (i,) in _draw([len(space)], algo, salt=derive_seed(ci, li)):
                    plan.append(({name: space[i]}, cfg.copy_weights))
        else:
            order = list(spaces)
            for idx in _draw([len(spaces[n]) for n in order], algo, salt=derive_seed(ci, 0xA11)):
                plan.append(({n: spaces[n][i] for n, i in zip(order, idx)}, cfg.copy_weights))
    return plan


def _build_candidate(model: Model, assignment: dict, seeds: dict, copy_weights: bool) -> Model:
    candidate = model.copy()
    for name, (l, k) in assignment.items():
        candidate = candidate.replace(name, sketch_layer(candidate[name], l, k, seeds[name], copy_weights))
    return candidate


def tune(
    model: Model,
    configs: Sequence[LayerConfig],
    accuracy_eval: Callable[[Model], float],
    threshold: float,
    higher_is_better: bool,
    objective_eval: Callable[[Model], float],
    minimize_objective: bool = True,
    algo=None,
    master_seed: int = 0,
    parallel_safe: bool = False,
    skipped: list | None = None,
) -> list[TrialResult]:
    """Run every trial and return all results ordered by ``trial_index``.

    Sketch seeds are ``derive_seed(master_seed, trial_index, layer_position)``.
    A callback that raises marks its trial failed (error kept, never best).
    ``parallel_safe=True`` lets trials run on a thread pool.
    """
    algo = algo or RandomSearch()
    positions = {n: i for i, n in enumerate(model.names())}
    plan = _plan(model, configs, algo, skipped)

    def run(item):
        index, (assignment, copy_weights) = item
        seeds = {n: derive_seed(master_seed, index, positions[n]) for n in assignment}
        start = time.perf_counter()
        total = 0
        try:
            candidate = _build_candidate(model, assignment, seeds, copy_weights)
            total = candidate.param_count().total_stored
            acc = float(accuracy_eval(candidate))
            obj = float(objective_eval(candidate))
        except Exception as exc:  # callbacks are user code
            return TrialResult(index, assignment, math.nan, math.nan, False, total,
                               (time.perf_counter() - start) * 1e3, seeds, f"{type(exc).__name__}: {exc}", copy_weights)
        ok = acc >= threshold if higher_is_better else acc <= threshold
        wall = (time.perf_counter() - start) * 1e3
        return TrialResult(index, assignment, acc, obj, bool(ok), total, wall, seeds, None, copy_weights)

    items = list(enumerate(plan))
    if parallel_safe:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]
    results.sort(key=lambda r: r.trial_index)
    return results


def best_trial(results: Sequence[TrialResult], minimize_objective: bool = True) -> TrialResult:
    feasible = [r for r in results if r.satisfied and not r.failed]
    if not feasible:
        raise NoFeasibleConfigError(f"none of {len(results)} trials met the accuracy threshold")
    sign = 1.0 if minimize_objective else -1.0
    return min(feasible, key=lambda r: (sign * r.objective, r.total_stored, r.trial_index))


def best_params(results: Sequence[TrialResult], minimize_objective: bool = True) -> dict:
    return dict(best_trial(results, minimize_objective).assignment)


def apply_best_params(model: Model, assignment: dict, copy_weights: bool = True, seeds: dict | None = None, master_seed: int = 0) -> Model:
    """New model with the assigned layers sketched; ``model`` is untouched.

    ``seeds`` (layer name -> sketch seed) reproduces a specific trial; missing
    entries fall back to ``derive_seed(master_seed, layer_position)``.
    """
    names = model.names()
    out = Model(list(model.layers), model.dtype)
    for name, (l, k) in assignment.items():
        if name not in names:
            raise ApplicationError(f"no layer named {name!r}")
        seed = (seeds or {}).get(name, derive_seed(master_seed, names.index(name)))
        out = out.replace(name, sketch_layer(model[name], l, k, seed, copy_weights))
    return out


REPORT_COLUMNS = ["trial_index", "layer", "l", "k", "accuracy", "objective", "satisfied", "total_stored", "wall_ms"]


def write_report(results: Sequence[TrialResult], path) -> None:
    """One CSV row per (trial, layer) pair."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in results:
            for name, (l, k) in r.assignment.items():
                w.writerow([r.trial_index, name, l, k, f"{r.accuracy:.9g}", f"{r.objective:.9g}",
                            str(r.satisfied).lower(), r.total_stored, f"{r.wall_ms:.6g}"])


class AutoTuner:
    """Stateful wrapper: ``tune()``, then ``best_params()`` /
    ``apply_best_params()``."""

    def __init__(
        self,
        model: Model,
        configs: Sequence[LayerConfig],
        accuracy_eval: Callable[[Model], float],
        threshold: float,
        objective_eval: Callable[[Model], float],
        higher_is_better: bool = True,
        minimize_objective: bool = True,
        algo=None,
        master_seed: int = 0,
        parallel_safe: bool = False,
    ):
        self.model = model
        self.configs = list(configs)
        self.accuracy_eval = accuracy_eval
        self.threshold = threshold
        self.objective_eval = objective_eval
        self.higher_is_better = higher_is_better
        self.minimize_objective = minimize_objective
        self.algo = algo or RandomSearch()
        self.master_seed = master_seed
        self.parallel_safe = parallel_safe
        self.results: list[TrialResult] = []
        self.skipped: list[dict] = []

    def tune(self) -> list[TrialResult]:
        self.skipped = []
        self.results = tune(
            self.model, self.configs, self.accuracy_eval, self.threshold, self.higher_is_better,
            self.objective_eval, self.minimize_objective, self.algo, self.master_seed,
            self.parallel_safe, self.skipped,
        )
        return self.results

    def best_trial(self) -> TrialResult:
        return best_trial(self.results, self.minimize_objective)

    def best_params(self) -> dict:
        return dict(self.best_trial().assignment)

    def apply_best_params(self) -> Model:
        best = self.best_trial()
        return apply_best_params(self.model, best.assignment, best.copy_weights, best.seeds, self.master_seed)

    def report(self, path) -> None:
        write_report(self.results, path)
