"""Exact and random-feature multi-head self-attention.

Sequence-rows convention: inputs and outputs are ``N x d_model``.
Projections have no bias: ``Q = x W_q``, ``K = x W_k``, ``V = x W_v``;
heads are contiguous column blocks of width ``d_h = d_model / h``; the
concatenated head outputs are mapped back by ``W_o``.

The random-feature layer replaces ``softmax(Q K^T / sqrt(d_h)) V`` by
``Phi_q (Phi_k^T V)`` normalized by ``Phi_q (Phi_k^T 1)``, which costs
O(N m d_h) per head and never forms an N x N matrix.
"""

from __future__ import annotations

import enum

import numpy as np

from ..linalg import ShapeError
from ..rng import Stream, derive_seed
from ..sketch import Dist, SketchOp, make_sketch
from .base import Layer, ParamCount

__all__ = [
    "Kernel",
    "feature_map",
    "ExactMha",
    "RandMha",
    "exact_mha_forward",
    "rand_mha_forward",
    "memory_estimate",
]

DEFAULT_EPS = 1e-6


class Kernel(str, enum.Enum):
    SOFTMAX = "softmax"
    RELU = "relu"


def _stabilizer(a: np.ndarray, mode: str | None):
    """Offset subtracted from exponent arguments and the flat argmax
    positions it was taken from (None when no stabilization)."""
    if mode is None:
        return 0.0, None
    if mode == "row":
        idx = np.argmax(a, axis=1)
        return a[np.arange(a.shape[0]), idx][:, None], idx
    if mode == "global":
        idx = int(np.argmax(a))
        return a.flat[idx], idx
    raise ValueError(f"unknown stabilization mode {mode!r}")


def feature_map(x, rf, kernel=Kernel.SOFTMAX, stabilize: str | None = None) -> np.ndarray:
    """Random features, one row per row of ``x``.

    softmax: ``exp(rf x_n - |x_n|^2/2) / sqrt(m)``, so that
    ``E[phi(q) . phi(k)] = exp(q . k)`` for unit-variance Gaussian ``rf``.
    relu: ``max(0, rf x_n) / sqrt(m)``.

    ``stabilize`` ("row" or "global") subtracts the maximum exponent argument
    per row or over the whole block before exponentiating.
    """
    x = np.asarray(x)
    rf = np.asarray(rf)
    if x.ndim != 2 or rf.ndim != 2 or x.shape[1] != rf.shape[1]:
        raise ShapeError(f"feature_map shapes {x.shape} and {rf.shape} are incompatible")
    m = rf.shape[0]
    proj = x @ rf.T
    if Kernel(kernel) is Kernel.RELU:
        return np.maximum(proj, 0.0) / np.sqrt(m)
    a = proj - 0.5 * np.sum(x * x, axis=1, keepdims=True)
    shift, _ = _stabilizer(a, stabilize)
    return np.exp(a - shift) / np.sqrt(m)


def _softmax_features_backward(x, rf, phi, dphi, stabilize, a):
    """Input gradient of the stabilized softmax feature map."""
    da = dphi * phi
    if stabilize == "row":
        _, idx = _stabilizer(a, "row")
        da[np.arange(a.shape[0]), idx] -= da.sum(axis=1)
    elif stabilize == "global":
        _, idx = _stabilizer(a, "global")
        da.flat[idx] -= da.sum()
    return da @ rf - da.sum(axis=1, keepdims=True) * x


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


class _MhaBase(Layer):
    embed_dim: int
    num_heads: int

    def _init_weights(self, w_q, w_k, w_v, w_o):
        d = self.embed_dim
        self.w_q, self.w_k, self.w_v, self.w_o = (np.array(w, dtype=np.float64) for w in (w_q, w_k, w_v, w_o))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d, d):
                raise ShapeError(f"projection shape {w.shape} != {(d, d)}")

    @staticmethod
    def _check_heads(embed_dim, num_heads):
        if num_heads < 1 or embed_dim % num_heads:
            raise ShapeError(f"embed_dim {embed_dim} not divisible by num_heads {num_heads}")

    @staticmethod
    def _random_weights(d, seed):
        s = Stream(seed)
        return [s.normal(d * d).reshape(d, d) / np.sqrt(d) for _ in range(4)]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def _heads(self):
        dh = self.head_dim
        return [slice(i * dh, (i + 1) * dh) for i in range(self.num_heads)]

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.embed_dim or x.shape[0] < 1:
            raise ShapeError(f"expected N x {self.embed_dim} input, got {x.shape}")
        return x

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}

    def param_count(self):
        n = 4 * self.embed_dim**2
        return ParamCount(n, n, n)

    def _cast(self, out, dtype):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            setattr(out, name, getattr(out, name).astype(dtype))
        return out

    def _finish_backward(self, x, heads_out, grad_out, dq, dk, dv):
        grads = {
            "w_q": x.T @ dq,
            "w_k": x.T @ dk,
            "w_v": x.T @ dv,
            "w_o": heads_out.T @ grad_out,
        }
        grad_x = dq @ self.w_q.T + dk @ self.w_k.T + dv @ self.w_v.T
        return grad_x, grads


class ExactMha(_MhaBase):
    """Softmax attention, the reference the random-feature layer estimates."""

    kind = "ExactMha"

    def __init__(self, embed_dim, num_heads, w_q, w_k, w_v, w_o):
        self._check_heads(embed_dim, num_heads)
        self.embed_dim, self.num_heads = int(embed_dim), int(num_heads)
        self._init_weights(w_q, w_k, w_v, w_o)

    @classmethod
    def init(cls, embed_dim, num_heads, seed=0) -> "ExactMha":
        return cls(embed_dim, num_heads, *cls._random_weights(embed_dim, seed))

    def _forward_cache(self, x):
        x = self._check_input(x)
        q, k, v = x @ self.w_q, x @ self.w_k, x @ self.w_v
        scale = 1.0 / np.sqrt(self.head_dim)
        heads = np.empty_like(q)
        probs = []
        for sl in self._heads():
            p = _softmax((q[:, sl] @ k[:, sl].T) * scale)
            probs.append(p)
            heads[:, sl] = p @ v[:, sl]
        return x, q, k, v, probs, heads

    def forward(self, x):
        *_, heads = self._forward_cache(x)
        return heads @ self.w_o

    def backward(self, x, grad_out):
        x, q, k, v, probs, heads = self._forward_cache(x)
        g = np.asarray(grad_out)
        dheads = g @ self.w_o.T
        scale = 1.0 / np.sqrt(self.head_dim)
        dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
        for sl, p in zip(self._heads(), probs):
            dout = dheads[:, sl]
            dv[:, sl] = p.T @ dout
            dp = dout @ v[:, sl].T
            ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True)) * scale
            dq[:, sl] = ds @ k[:, sl]
            dk[:, sl] = ds.T @ q[:, sl]
        return self._finish_backward(x, heads, g, dq, dk, dv)

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        n = int(input_shape[0])
        d, h = self.embed_dim, self.num_heads
        # x, Q, K, V, concatenated heads, output, plus one N x N score block per head
        work = 6 * n * d + h * n * n
        return itemsize * (4 * d * d + work)

    def config(self):
        return {"embed_dim": self.embed_dim, "num_heads": self.num_heads}

    def copy(self) -> "ExactMha":
        return ExactMha(self.embed_dim, self.num_heads, self.w_q.copy(), self.w_k.copy(), self.w_v.copy(), self.w_o.copy())

    def astype(self, dtype) -> "ExactMha":
        return self._cast(self.copy(), dtype)


class RandMha(_MhaBase):
    """Multi-head attention with positive (softmax) or ReLU random features.

    Each head owns a fixed ``m x d_h`` Gaussian feature matrix with
    unit-variance entries.  For the softmax kernel the query and key blocks
    are scaled by ``d_h ** -0.25`` before the feature map so feature inner
    products estimate ``exp(q . k / sqrt(d_h))``.  Exponents are stabilized
    by a per-row maximum on the query side and a single maximum over the
    sequence on the key side; both offsets cancel between numerator and
    denominator (up to the ``eps`` term).

    A query row whose normalizer is exactly zero (possible only with the
    ReLU kernel) returns the mean of the value rows.
    """

    kind = "RandMha"

    def __init__(self, embed_dim, num_heads, num_features, kernel, w_q, w_k, w_v, w_o, rf, eps=DEFAULT_EPS, seed=None):
        self._check_heads(embed_dim, num_heads)
        self.embed_dim, self.num_heads = int(embed_dim), int(num_heads)
        self.num_features = int(num_features)
        self.kernel = Kernel(kernel)
        self.eps = float(eps)
        self.seed = seed
        self._init_weights(w_q, w_k, w_v, w_o)
        self.rf = list(rf)
        if len(self.rf) != num_heads:
            raise ValueError("need one feature sketch per head")
        for op in self.rf:
            if op.shape != (self.num_features, self.head_dim):
                raise ShapeError(f"feature sketch shape {op.shape} != {(self.num_features, self.head_dim)}")
        self._rf_mats = [self._unit_variance(op) for op in self.rf]

    @staticmethod
    def _unit_variance(op: SketchOp) -> np.ndarray:
        # Gaussian sketches are stored with variance 1/rows
        if op.dist is Dist.EXPLICIT:
            return op.matrix
        return op.matrix * np.sqrt(op.rows)

    @staticmethod
    def feature_sketches(num_heads, num_features, head_dim, seed) -> list[SketchOp]:
        return [make_sketch(Dist.GAUSSIAN, num_features, head_dim, derive_seed(seed, 0xFEA7, i)) for i in range(num_heads)]

    @classmethod
    def init(cls, embed_dim, num_heads, num_features, kernel=Kernel.SOFTMAX, seed=0, eps=DEFAULT_EPS) -> "RandMha":
        cls._check_heads(embed_dim, num_heads)
        rf = cls.feature_sketches(num_heads, num_features, embed_dim // num_heads, seed)
        return cls(embed_dim, num_heads, num_features, kernel, *cls._random_weights(embed_dim, seed), rf, eps, seed)

    @classmethod
    def from_exact(cls, exact: ExactMha, num_features, kernel=Kernel.SOFTMAX, seed=0, eps=DEFAULT_EPS) -> "RandMha":
        rf = cls.feature_sketches(exact.num_heads, num_features, exact.head_dim, seed)
        return cls(
            exact.embed_dim, exact.num_heads, num_features, kernel,
            exact.w_q.copy(), exact.w_k.copy(), exact.w_v.copy(), exact.w_o.copy(), rf, eps, seed,
        )

    def sketches(self):
        return {f"rf.{i}": op for i, op in enumerate(self.rf)}

    def _features(self, z, rf, stabilize):
        """Returns (phi, exponent args or None)."""
        if self.kernel is Kernel.RELU:
            return feature_map(z, rf, Kernel.RELU), None
        a = z @ rf.T - 0.5 * np.sum(z * z, axis=1, keepdims=True)
        shift, _ = _stabilizer(a, stabilize)
        return np.exp(a - shift) / np.sqrt(rf.shape[0]), a

    def _head_forward(self, qh, kh, vh, rf):
        c = self.head_dim**-0.25 if self.kernel is Kernel.SOFTMAX else 1.0
        zq, zk = c * qh, c * kh
        phi_q, aq = self._features(zq, rf, "row")
        phi_k, ak = self._features(zk, rf, "global")
        kv = phi_k.T @ vh
        ksum = phi_k.sum(axis=0)
        num = phi_q @ kv
        den = phi_q @ ksum
        fallback = den <= 0.0
        out = num / (den + self.eps)[:, None]
        if np.any(fallback):
            out[fallback] = vh.mean(axis=0)
        cache = (c, zq, zk, phi_q, phi_k, aq, ak, kv, ksum, num, den, fallback)
        return out, cache

    def _forward_cache(self, x):
        x = self._check_input(x)
        q, k, v = x @ self.w_q, x @ self.w_k, x @ self.w_v
        heads = np.empty_like(q)
        caches = []
        for sl, rf in zip(self._heads(), self._rf_mats):
            heads[:, sl], cache = self._head_forward(q[:, sl], k[:, sl], v[:, sl], rf)
            caches.append(cache)
        return x, q, k, v, heads, caches

    def forward(self, x):
        *_, heads, _ = self._forward_cache(x)
        return heads @ self.w_o

    def backward(self, x, grad_out):
        x, q, k, v, heads, caches = self._forward_cache(x)
        g = np.asarray(grad_out)
        dheads = g @ self.w_o.T
        dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
        n = x.shape[0]
        for sl, rf, cache, hout in zip(self._heads(), self._rf_mats, caches, (heads[:, s] for s in self._heads())):
            c, zq, zk, phi_q, phi_k, aq, ak, kv, ksum, num, den, fb = cache
            dout = dheads[:, sl].copy()
            if np.any(fb):
                dv[:, sl] += dout[fb].sum(axis=0) / n
                dout[fb] = 0.0
            denom = den + self.eps
            dnum = dout / denom[:, None]
            dden = -np.sum(dout * hout, axis=1) / denom
            dden[fb] = 0.0
            dphi_q = dnum @ kv.T + np.outer(dden, ksum)
            dkv = phi_q.T @ dnum
            dksum = phi_q.T @ dden
            dphi_k = v[:, sl] @ dkv.T + dksum[None, :]
            dv[:, sl] += phi_k @ dkv
            if self.kernel is Kernel.SOFTMAX:
                dzq = _softmax_features_backward(zq, rf, phi_q, dphi_q, "row", aq)
                dzk = _softmax_features_backward(zk, rf, phi_k, dphi_k, "global", ak)
            else:
                m = rf.shape[0]
                dzq = (dphi_q * (zq @ rf.T > 0)) @ rf / np.sqrt(m)
                dzk = (dphi_k * (zk @ rf.T > 0)) @ rf / np.sqrt(m)
            dq[:, sl] = c * dzq
            dk[:, sl] = c * dzk
        return self._finish_backward(x, heads, g, dq, dk, dv)

    def param_count(self):
        n = 4 * self.embed_dim**2
        return ParamCount(n, n + self.num_features * self.embed_dim, n)

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        n = int(input_shape[0])
        d, h, m = self.embed_dim, self.num_heads, self.num_features
        # x, Q, K, V, heads, output; per head: Phi_q, Phi_k (N x m), Phi_k^T V (m x d_h),
        # key sums (m) and normalizers (N)
        work = 6 * n * d + 2 * h * n * m + m * d + h * m + h * n
        return itemsize * (self.param_count().total_stored + work)

    def config(self):
        return {
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "num_features": self.num_features,
            "kernel": self.kernel.value,
            "eps": self.eps,
            "seed": self.seed,
        }

    def copy(self) -> "RandMha":
        return RandMha(
            self.embed_dim, self.num_heads, self.num_features, self.kernel,
            self.w_q.copy(), self.w_k.copy(), self.w_v.copy(), self.w_o.copy(), self.rf, self.eps, self.seed,
        )

    def astype(self, dtype) -> "RandMha":
        out = self._cast(self.copy(), dtype)
        out._rf_mats = [r.astype(dtype) for r in out._rf_mats]
        return out


def exact_mha_forward(layer: _MhaBase, x) -> np.ndarray:
    """Exact softmax attention using ``layer``'s projection weights."""
    if isinstance(layer, ExactMha):
        return layer.forward(x)
    ref = ExactMha(layer.embed_dim, layer.num_heads, layer.w_q, layer.w_k, layer.w_v, layer.w_o)
    return ref.forward(x)


def rand_mha_forward(layer: RandMha, x) -> np.ndarray:
    return layer.forward(x)


def memory_estimate(layer: Layer, input_shape, itemsize: int = 8) -> int:
    """Analytic peak bytes: parameters plus forward workspace."""
    return layer.memory_estimate(input_shape, itemsize)
