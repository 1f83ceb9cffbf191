"""Seeded random sketching operators.

A :class:`SketchOp` is a small descriptor ``(dist, rows, cols, seed)`` whose
dense ``rows x cols`` matrix is generated on first use and cached.  All
distributions are scaled so that ``E[S^T S] = I``.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError
from .rng import Stream

__all__ = ["Dist", "SketchOp", "make_sketch", "apply_left", "apply_right_t"]


class Dist(str, enum.Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    SPARSE_SIGN = "sparse_sign"
    EXPLICIT = "explicit"  # caller-supplied matrix, used by tests and fixtures


@dataclass(eq=False)
class SketchOp:
    dist: Dist
    rows: int
    cols: int
    seed: int = 0
    nnz_per_col: int | None = None
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def explicit(cls, matrix) -> "SketchOp":
        mat = np.array(matrix, dtype=np.float64, order="C")
        if mat.ndim != 2:
            raise ShapeError("explicit sketch must be 2-D")
        mat.setflags(write=False)
        return cls(Dist.EXPLICIT, mat.shape[0], mat.shape[1], _matrix=mat)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def matrix(self) -> np.ndarray:
        """The realized (read-only) sketch matrix."""
        if self._matrix is None:
            with self._lock:
                if self._matrix is None:
                    mat = _realize(self)
                    mat.setflags(write=False)
                    self._matrix = mat
        return self._matrix

    def descriptor(self) -> dict:
        d = {"dist": self.dist.value, "rows": self.rows, "cols": self.cols, "seed": self.seed}
        if self.dist is Dist.SPARSE_SIGN:
            d["nnz_per_col"] = self.nnz_per_col
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "SketchOp":
        return make_sketch(d["dist"], d["rows"], d["cols"], d["seed"], d.get("nnz_per_col"))

    def same_as(self, other: "SketchOp") -> bool:
        if self.dist is Dist.EXPLICIT or other.dist is Dist.EXPLICIT:
            return self.shape == other.shape and np.array_equal(self.matrix, other.matrix)
        return self.descriptor() == other.descriptor()


def make_sketch(dist, k: int, d: int, seed: int = 0, nnz_per_col: int | None = None) -> SketchOp:
    """Describe a ``k x d`` sketch; the matrix is built lazily.

    ``nnz_per_col`` applies to sparse-sign sketches only and defaults to
    ``min(8, k)``.
    """
    dist = Dist(dist)
    if dist is Dist.EXPLICIT:
        raise ValueError("use SketchOp.explicit for caller-supplied matrices")
    if k < 1 or d < 1:
        raise ShapeError(f"sketch dimensions must be positive, got {k}x{d}")
    if dist is Dist.SPARSE_SIGN:
        nnz_per_col = min(8, k) if nnz_per_col is None else int(nnz_per_col)
        if not 1 <= nnz_per_col <= k:
            raise ShapeError(f"nnz_per_col must lie in [1, {k}], got {nnz_per_col}")
    else:
        nnz_per_col = None
    return SketchOp(dist, int(k), int(d), int(seed) & 0xFFFF_FFFF_FFFF_FFFF, nnz_per_col)


def _realize(op: SketchOp) -> np.ndarray:
    k, d = op.rows, op.cols
    stream = Stream(op.seed)
    if op.dist is Dist.GAUSSIAN:
        return stream.normal(k * d).reshape(k, d) / np.sqrt(k)
    if op.dist is Dist.RADEMACHER:
        return stream.signs(k * d).reshape(k, d) / np.sqrt(k)
    if op.dist is Dist.SPARSE_SIGN:
        s = op.nnz_per_col
        keys = stream.uniform(k * d).reshape(d, k)
        rows = np.argsort(keys, axis=1, kind="stable")[:, :s]
        vals = stream.signs(d * s).reshape(d, s) / np.sqrt(s)
        mat = np.zeros((k, d))
        mat[rows, np.arange(d)[:, None]] = vals
        return mat
    raise ValueError(f"cannot realize {op.dist}")


def apply_left(s: SketchOp, a) -> np.ndarray:
    """``S @ a``."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != s.cols:
        raise ShapeError(f"sketch {s.shape} cannot left-multiply {a.shape}")
    return s.matrix @ a


def apply_right_t(s: SketchOp, a) -> np.ndarray:
    """``a @ S`` (maps n x k to n x d)."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[1] != s.rows:
        raise ShapeError(f"{a.shape} cannot right-multiply sketch {s.shape}")
    return a @ s.matrix
