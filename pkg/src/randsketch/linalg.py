"""Dense linear algebra kernels.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 (row-major,
C-contiguous).  The factorizations here are written out explicitly rather
than delegated to LAPACK so their conventions (sign choice, pivot order,
rank rule, failure modes) are fixed by this module and do not drift with
the BLAS build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "NotPositiveDefiniteError",
    "QrcpResult",
    "as_matrix",
    "matmul",
    "transpose",
    "frobenius_norm",
    "qr_householder",
    "qrcp",
    "cholesky",
    "svd_small",
]

EPS = np.finfo(np.float64).eps


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NotPositiveDefiniteError(ArithmeticError):
    """Cholesky hit a pivot that is not safely positive."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


def as_matrix(a, name: str = "a") -> np.ndarray:
    """Return ``a`` as a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with a shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    """Explicit transposed copy."""
    return np.ascontiguousarray(np.asarray(a).T)


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _householder(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Reflector ``I - tau v v^T`` with ``v[0] = 1`` mapping x onto alpha*e1.

    ``alpha`` is chosen with sign opposite to x[0] (no cancellation).
    """
    v = x.copy()
    normx = np.linalg.norm(x)
    if normx == 0.0:
        v[:] = 0.0
        v[0] = 1.0
        return v, 0.0, 0.0
    alpha = -normx if x[0] >= 0 else normx
    v[0] = x[0] - alpha
    v /= v[0]
    tau = (alpha - x[0]) / alpha
    return v, tau, alpha


def qr_householder(a) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR of a tall matrix.

    Returns ``q`` (m x n, orthonormal columns) and ``r`` (n x n, upper
    triangular) with a non-negative diagonal.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        raise ShapeError(f"qr_householder needs m >= n, got {a.shape}")
    r = a.copy()
    vs = []
    taus = np.zeros(n)
    for j in range(n):
        v, tau, _ = _householder(r[j:, j])
        taus[j] = tau
        vs.append(v)
        if tau != 0.0:
            block = r[j:, j:]
            block -= tau * np.outer(v, v @ block)
    q = np.zeros((m, n))
    q[:n, :n] = np.eye(n)
    for j in range(n - 1, -1, -1):
        if taus[j] != 0.0:
            block = q[j:, j:]
            block -= taus[j] * np.outer(vs[j], vs[j] @ block)
    r = np.triu(r[:n, :])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


@dataclass(frozen=True)
class QrcpResult:
    q: np.ndarray
    r_mat: np.ndarray
    pivots: np.ndarray
    rank: int
    diag: np.ndarray  # |R_ii| for every elimination step, not only the first ``rank``


def qrcp(a, rank_tol: float = 0.0) -> QrcpResult:
    """Householder QR with greedy column pivoting.

    At each step the remaining column with the largest residual norm is
    swapped to the front.  Residual norms are downdated after every step and
    recomputed from scratch when the downdated value drops below a tenth of
    the norm it was last recomputed from.

    The detected rank is the number of leading diagonal entries with
    ``|R_ii| > rank_tol * |R_00|``; ``q`` and ``r_mat`` are truncated to it.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m == 0 or n == 0:
        raise ShapeError("qrcp of an empty matrix")
    if rank_tol < 0:
        raise ValueError("rank_tol must be non-negative")
    r = a.copy()
    piv = np.arange(n)
    steps = min(m, n)
    norms = np.sqrt(np.sum(r * r, axis=0))
    ref = norms.copy()
    vs = []
    taus = np.zeros(steps)
    for j in range(steps):
        p = j + int(np.argmax(norms[j:]))
        if p != j:
            r[:, [j, p]] = r[:, [p, j]]
            piv[[j, p]] = piv[[p, j]]
            norms[[j, p]] = norms[[p, j]]
            ref[[j, p]] = ref[[p, j]]
        v, tau, _ = _householder(r[j:, j])
        taus[j] = tau
        vs.append(v)
        if tau != 0.0:
            block = r[j:, j:]
            block -= tau * np.outer(v, v @ block)
        r[j + 1 :, j] = 0.0
        if j + 1 < n:
            rest = slice(j + 1, n)
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = np.where(norms[rest] > 0, np.abs(r[j, rest]) / norms[rest], 0.0)
            down = norms[rest] * np.sqrt(np.maximum(0.0, 1.0 - ratio**2))
            stale = down < 0.1 * ref[rest]
            if np.any(stale):
                idx = np.nonzero(stale)[0] + j + 1
                fresh = np.sqrt(np.sum(r[j + 1 :, idx] ** 2, axis=0))
                down[stale] = fresh
                ref[idx] = fresh
            norms[rest] = down
    diag = np.abs(np.diag(r[:steps, :steps]))
    if diag[0] == 0.0:
        rank = 0
    else:
        keep = diag > rank_tol * diag[0]
        rank = int(np.argmin(keep)) if not keep.all() else steps
    q = np.zeros((m, steps))
    q[:steps, :steps] = np.eye(steps)
    for j in range(steps - 1, -1, -1):
        if taus[j] != 0.0:
            block = q[j:, j:]
            block -= taus[j] * np.outer(vs[j], vs[j] @ block)
    r = np.triu(r[:steps, :])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    return QrcpResult(
        q=np.ascontiguousarray(q[:, :rank]),
        r_mat=np.ascontiguousarray(r[:rank, :]),
        pivots=piv,
        rank=rank,
        diag=diag,
    )


def cholesky(g) -> np.ndarray:
    """Upper-triangular ``R`` with ``R^T R = g``.

    Raises NotPositiveDefiniteError when a pivot falls to
    ``n * eps * max(diag(g))`` or below.
    """
    g = as_matrix(g, "g")
    n = g.shape[0]
    if g.shape != (n, n):
        raise ShapeError(f"cholesky needs a square matrix, got {g.shape}")
    scale = max(float(np.max(np.abs(g))), 1.0) if n else 1.0
    if n and np.max(np.abs(g - g.T)) > 1e-10 * scale:
        raise ValueError("cholesky input is not symmetric")
    r = np.zeros_like(g)
    floor = n * EPS * (float(np.max(np.diag(g))) if n else 0.0)
    for j in range(n):
        col = r[:j, j]
        pivot = g[j, j] - col @ col
        if not pivot > floor:
            raise NotPositiveDefiniteError(
                f"non-positive pivot {pivot:.3e} at index {j}", index=j
            )
        rjj = np.sqrt(pivot)
        r[j, j] = rjj
        if j + 1 < n:
            r[j, j + 1 :] = (g[j, j + 1 :] - col @ r[:j, j + 1 :]) / rjj
    return r


def _jacobi_order(n: int):
    """Round-robin pairings: every pair (i, j) appears once per sweep, and
    pairs within a round are disjoint so their rotations commute."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    for _ in range(size - 1):
        left = []
        right = []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= 0 and q >= 0:
                left.append(min(p, q))
                right.append(max(p, q))
        yield np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)
        players = [players[0], players[-1]] + players[1:-1]


def svd_small(a, tol: float = 1e-12, max_sweeps: int = 30):
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``(u, s, v)`` with ``a = u @ diag(s) @ v.T``, ``s`` sorted in
    decreasing order.  Columns of ``u`` belonging to zero singular values are
    completed to an orthonormal set.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        v, s, u = svd_small(a.T, tol=tol, max_sweeps=max_sweeps)
        return u, s, v
    w = a.copy()
    v = np.eye(n)
    rounds = list(_jacobi_order(n)) if n > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for left, right in rounds:
            if left.size == 0:
                continue
            x = w[:, left]
            y = w[:, right]
            alpha = np.sum(x * x, axis=0)
            beta = np.sum(y * y, axis=0)
            gamma = np.sum(x * y, axis=0)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not np.any(active):
                continue
            rotated = True
            li, ri = left[active], right[active]
            al, be, ga = alpha[active], beta[active], gamma[active]
            zeta = (be - al) / (2.0 * ga)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = c * t
            for mat in (w, v):
                xc = mat[:, li]
                yc = mat[:, ri]
                mat[:, li] = c * xc - sn * yc
                mat[:, ri] = sn * xc + c * yc
        if not rotated:
            break
    s = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    if n and s[0] > 0:
        keep = s > s[0] * max(m, n) * EPS
    else:
        keep = np.zeros(n, dtype=bool)
    u[:, keep] = w[:, keep] / s[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
    return u, s, v


def _complete_basis(u: np.ndarray, have: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not flagged in ``have`` with unit vectors
    orthogonal to everything already present."""
    m, n = u.shape
    basis = [u[:, j] for j in range(n) if have[j]]
    out = u.copy()
    cand = 0
    for j in range(n):
        if have[j]:
            continue
        while True:
            e = np.zeros(m)
            e[cand % m] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                break
        basis.append(e)
        out[:, j] = e
    return out
