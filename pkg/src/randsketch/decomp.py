"""Randomized matrix decompositions: RSVD and CQRRPT."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .linalg import NotPositiveDefiniteError, ShapeError, as_matrix, cholesky, qr_householder, qrcp, svd_small
from .rng import derive_seed
from .sketch import Dist, make_sketch

__all__ = ["RsvdResult", "CqrrptResult", "DecompositionError", "rsvd", "cqrrpt"]


class DecompositionError(RuntimeError):
    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


@dataclass(frozen=True)
class RsvdResult:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class CqrrptResult:
    q: np.ndarray
    r_mat: np.ndarray
    pivots: np.ndarray
    rank: int
    gamma: float


def rsvd(a, k: int, oversample: int = 8, power_iters: int = 1, seed: int = 0) -> RsvdResult:
    """Rank-``k`` randomized SVD.

    Gaussian range sketch with ``k + oversample`` columns, ``power_iters``
    rounds of re-orthonormalized subspace iteration, then an exact SVD of the
    small projected matrix.
    """
    a = as_matrix(a)
    m, n = a.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"k={k} outside [1, {min(m, n)}]")
    width = k + oversample
    if oversample < 0 or width > min(m, n):
        raise ValueError(f"k + oversample = {width} exceeds min(m, n) = {min(m, n)}")
    omega = make_sketch(Dist.GAUSSIAN, width, n, seed).matrix.T
    y = a @ omega
    for _ in range(power_iters):
        q, _ = qr_householder(y)
        y = a @ (a.T @ q)
    q, _ = qr_householder(y)
    b = q.T @ a
    ub, s, vb = svd_small(b)
    return RsvdResult(u=q @ ub[:, :k], s=s[:k].copy(), v=np.ascontiguousarray(vb[:, :k]))


def cqrrpt(a, gamma: float = 4.0, rank_tol: float = 1e-12, seed: int = 0) -> CqrrptResult:
    """CholeskyQR with randomized pivoting for a tall matrix.

    The pivots and a preconditioner come from a column-pivoted QR of the
    sparse-sign sketch ``S @ a`` (``ceil(gamma * n)`` rows); the
    preconditioned matrix is then orthonormalized by a single CholeskyQR.
    If Cholesky breaks down, the sketch is redrawn once at twice the size.
    """
    a = as_matrix(a)
    m, n = a.shape
    if not gamma > 1.0:
        raise ValueError("gamma must exceed 1")
    d = math.ceil(gamma * n)
    if m < d:
        raise ShapeError(f"cqrrpt needs m >= ceil(gamma*n) = {d}, got m={m}")
    try:
        return _cqrrpt_once(a, gamma, rank_tol, seed)
    except NotPositiveDefiniteError:
        pass
    gamma2 = min(2.0 * gamma, m / n)
    try:
        return _cqrrpt_once(a, gamma2, rank_tol, derive_seed(seed, 1))
    except NotPositiveDefiniteError as exc:
        raise DecompositionError(
            f"cholesky failed twice (last at index {exc.index}); detected rank {exc.rank}",
            rank=exc.rank,
        ) from exc


def _cqrrpt_once(a: np.ndarray, gamma: float, rank_tol: float, seed: int) -> CqrrptResult:
    m, n = a.shape
    d = min(math.ceil(gamma * n), m)
    sk = make_sketch(Dist.SPARSE_SIGN, d, m, seed)
    sketched = sk.matrix @ a
    res = qrcp(sketched, rank_tol)
    r = res.rank
    piv = res.pivots
    ap = a[:, piv]
    if r == 0:
        return CqrrptResult(np.zeros((m, 0)), np.zeros((0, n)), piv, 0, gamma)
    r_sk = res.r_mat
    a_pre = solve_triangular(r_sk[:, :r], ap[:, :r].T, trans="T", lower=False).T
    try:
        r_c = cholesky(a_pre.T @ a_pre)
    except NotPositiveDefiniteError as exc:
        exc.rank = r
        raise
    q = solve_triangular(r_c, a_pre.T, trans="T", lower=False).T
    return CqrrptResult(
        q=np.ascontiguousarray(q),
        r_mat=r_c @ r_sk,
        pivots=piv,
        rank=r,
        gamma=gamma,
    )
