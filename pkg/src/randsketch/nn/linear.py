"""Dense and sketched fully connected layers.

Column-vector convention: inputs are ``d_in x batch`` and outputs
``d_out x batch``.

A sketched layer with ``l`` terms of rank ``k`` computes::

    y = 1/(2l) * sum_i [ S1_i^T (U1_i x) + U2_i (S2_i x) ] + b

with frozen random sketches ``S1_i`` (k x d_out), ``S2_i`` (k x d_in) and
learnable ``U1_i`` (k x d_in), ``U2_i`` (d_out x k).  Initializing
``U1_i = S1_i W`` and ``U2_i = W S2_i^T`` gives ``E[y] = W x + b`` because
every sketch satisfies ``E[S^T S] = I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..linalg import ShapeError
from ..rng import Stream, derive_seed
from ..sketch import Dist, SketchOp, make_sketch
from .base import Layer, ParamCount

__all__ = [
    "DenseLinear",
    "SkLinear",
    "SkTerm",
    "dense_linear_forward",
    "sk_linear_forward",
    "sk_linear_backward",
    "sk_linear_from_dense",
    "skip_rule_exceeds",
]


def skip_rule_exceeds(d_in: int, d_out: int, l: int, k: int) -> bool:
    """True when ``2lk(d_in + d_out) > d_in * d_out``."""
    return 2 * l * k * (d_in + d_out) > d_in * d_out


def _as_cols(x, rows: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != rows:
        raise ShapeError(f"expected input with {rows} rows, got shape {x.shape}")
    return x


def dense_linear_forward(w, b, x) -> np.ndarray:
    w = np.asarray(w)
    x = _as_cols(x, w.shape[1])
    b = np.asarray(b).reshape(-1)
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"bias length {b.shape[0]} != d_out {w.shape[0]}")
    return w @ x + b[:, None]


class DenseLinear(Layer):
    kind = "DenseLinear"

    def __init__(self, weight, bias=None):
        self.weight = np.array(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("weight must be 2-D")
        d_out = self.weight.shape[0]
        self.bias = np.zeros(d_out) if bias is None else np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (d_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({d_out},)")

    @classmethod
    def init(cls, d_in: int, d_out: int, seed: int = 0) -> "DenseLinear":
        std = np.sqrt(2.0 / (d_in + d_out))
        w = Stream(seed).normal(d_out * d_in).reshape(d_out, d_in) * std
        return cls(w, np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return dense_linear_forward(self.weight, self.bias, x)

    def backward(self, x, grad_out):
        x = _as_cols(x, self.d_in)
        g = _as_cols(grad_out, self.d_out)
        return self.weight.T @ g, {"weight": g @ x.T, "bias": g.sum(axis=1)}

    def param_count(self):
        n = self.weight.size + self.bias.size
        return ParamCount(n, n, n)

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        batch = input_shape[1] if len(input_shape) > 1 else 1
        floats = self.weight.size + self.bias.size + (self.d_in + self.d_out) * batch
        return itemsize * floats

    def config(self):
        return {"d_in": self.d_in, "d_out": self.d_out}

    def copy(self) -> "DenseLinear":
        return DenseLinear(self.weight.copy(), self.bias.copy())

    def astype(self, dtype) -> "DenseLinear":
        out = self.copy()
        out.weight = out.weight.astype(dtype)
        out.bias = out.bias.astype(dtype)
        return out


@dataclass
class SkTerm:
    s1: SketchOp  # k x d_out
    u1: np.ndarray  # k x d_in
    s2: SketchOp  # k x d_in
    u2: np.ndarray  # d_out x k
    s1_mat: np.ndarray | None = None
    s2_mat: np.ndarray | None = None

    def __post_init__(self):
        if self.s1_mat is None:
            self.s1_mat = self.s1.matrix
        if self.s2_mat is None:
            self.s2_mat = self.s2.matrix


def _term_seeds(seed: int, i: int) -> tuple[int, int]:
    return derive_seed(seed, i, 1), derive_seed(seed, i, 2)


class SkLinear(Layer):
    """Sketched replacement for :class:`DenseLinear`."""

    kind = "SkLinear"

    def __init__(self, d_in: int, d_out: int, num_terms: int, low_rank: int, terms, bias, seed: int | None = None, dist=Dist.GAUSSIAN):
        if num_terms < 1 or low_rank < 1:
            raise ValueError("num_terms and low_rank must be >= 1")
        if len(terms) != num_terms:
            raise ValueError(f"expected {num_terms} terms, got {len(terms)}")
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.num_terms = int(num_terms)
        self.low_rank = int(low_rank)
        self.seed = seed
        self.dist = Dist(dist)
        self.terms = list(terms)
        self.bias = np.array(bias, dtype=np.float64).reshape(-1)
        k = self.low_rank
        for t in self.terms:
            if (
                t.s1.shape != (k, self.d_out)
                or t.s2.shape != (k, self.d_in)
                or t.u1.shape != (k, self.d_in)
                or t.u2.shape != (self.d_out, k)
            ):
                raise ShapeError("sketch term shapes do not match the layer")
        if self.bias.shape != (self.d_out,):
            raise ShapeError("bias shape mismatch")

    @classmethod
    def init(cls, d_in, d_out, num_terms=1, low_rank=16, seed=0, dist=Dist.GAUSSIAN) -> "SkLinear":
        """Fresh layer: U entries i.i.d. Normal(0, 2/(d_in+d_out)), zero bias."""
        std = np.sqrt(2.0 / (d_in + d_out))
        stream = Stream(derive_seed(seed, 0xB1A5))
        terms = []
        for i in range(num_terms):
            a, b = _term_seeds(seed, i)
            terms.append(
                SkTerm(
                    s1=make_sketch(dist, low_rank, d_out, a),
                    u1=stream.normal(low_rank * d_in).reshape(low_rank, d_in) * std,
                    s2=make_sketch(dist, low_rank, d_in, b),
                    u2=stream.normal(d_out * low_rank).reshape(d_out, low_rank) * std,
                )
            )
        return cls(d_in, d_out, num_terms, low_rank, terms, np.zeros(d_out), seed=seed, dist=dist)

    @classmethod
    def from_dense(cls, w, b, num_terms: int, low_rank: int, seed: int = 0, dist=Dist.GAUSSIAN) -> "SkLinear":
        w = np.asarray(w, dtype=np.float64)
        d_out, d_in = w.shape
        b = np.zeros(d_out) if b is None else b
        terms = []
        for i in range(num_terms):
            a, c = _term_seeds(seed, i)
            s1 = make_sketch(dist, low_rank, d_out, a)
            s2 = make_sketch(dist, low_rank, d_in, c)
            terms.append(SkTerm(s1=s1, u1=s1.matrix @ w, s2=s2, u2=w @ s2.matrix.T))
        return cls(d_in, d_out, num_terms, low_rank, terms, b, seed=seed, dist=dist)

    def params(self):
        out = {}
        for i, t in enumerate(self.terms):
            out[f"u1.{i}"] = t.u1
            out[f"u2.{i}"] = t.u2
        out["bias"] = self.bias
        return out

    def sketches(self):
        out = {}
        for i, t in enumerate(self.terms):
            out[f"s1.{i}"] = t.s1
            out[f"s2.{i}"] = t.s2
        return out

    def forward(self, x):
        x = _as_cols(x, self.d_in)
        acc = None
        for t in self.terms:
            y = t.s1_mat.T @ (t.u1 @ x) + t.u2 @ (t.s2_mat @ x)
            acc = y if acc is None else acc + y
        return acc * (1.0 / (2 * self.num_terms)) + self.bias[:, None]

    def backward(self, x, grad_out):
        x = _as_cols(x, self.d_in)
        g = _as_cols(grad_out, self.d_out)
        scale = 1.0 / (2 * self.num_terms)
        grads = {}
        grad_x = np.zeros((self.d_in, g.shape[1]), dtype=np.result_type(x, g))
        for i, t in enumerate(self.terms):
            s1g = t.s1_mat @ g
            s2x = t.s2_mat @ x
            grads[f"u1.{i}"] = scale * (s1g @ x.T)
            grads[f"u2.{i}"] = scale * (g @ s2x.T)
            grad_x += t.u1.T @ s1g + t.s2_mat.T @ (t.u2.T @ g)
        grads["bias"] = g.sum(axis=1)
        return grad_x * scale, grads

    def param_count(self):
        lk = self.num_terms * self.low_rank
        learnable = lk * (self.d_in + self.d_out) + self.d_out
        return ParamCount(
            learnable=learnable,
            total_stored=2 * lk * (self.d_in + self.d_out) + self.d_out,
            dense_equivalent=self.d_in * self.d_out + self.d_out,
        )

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        batch = input_shape[1] if len(input_shape) > 1 else 1
        work = (self.d_in + self.d_out) * batch + 2 * self.low_rank * batch + self.d_out * batch
        return itemsize * (self.param_count().total_stored + work)

    def config(self):
        return {
            "d_in": self.d_in,
            "d_out": self.d_out,
            "num_terms": self.num_terms,
            "low_rank": self.low_rank,
            "seed": self.seed,
            "dist": self.dist.value,
        }

    def copy(self) -> "SkLinear":
        terms = [SkTerm(t.s1, t.u1.copy(), t.s2, t.u2.copy(), t.s1_mat, t.s2_mat) for t in self.terms]
        return SkLinear(self.d_in, self.d_out, self.num_terms, self.low_rank, terms, self.bias.copy(), self.seed, self.dist)

    def astype(self, dtype) -> "SkLinear":
        out = self.copy()
        for t in out.terms:
            t.u1 = t.u1.astype(dtype)
            t.u2 = t.u2.astype(dtype)
            t.s1_mat = t.s1_mat.astype(dtype)
            t.s2_mat = t.s2_mat.astype(dtype)
        out.bias = out.bias.astype(dtype)
        return out


def sk_linear_forward(layer: SkLinear, x) -> np.ndarray:
    return layer.forward(x)


def sk_linear_backward(layer: SkLinear, x, grad_out) -> dict:
    """Gradients as ``{grad_x, grad_u1: [...], grad_u2: [...], grad_b}``."""
    grad_x, g = layer.backward(x, grad_out)
    n = layer.num_terms
    return {
        "grad_x": grad_x,
        "grad_u1": [g[f"u1.{i}"] for i in range(n)],
        "grad_u2": [g[f"u2.{i}"] for i in range(n)],
        "grad_b": g["bias"],
    }


def sk_linear_from_dense(w, b, l: int, k: int, seed: int = 0) -> SkLinear:
    return SkLinear.from_dense(w, b, num_terms=l, low_rank=k, seed=seed)
