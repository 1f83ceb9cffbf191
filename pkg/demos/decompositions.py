"""Randomized SVD and sketch-preconditioned pivoted QR on synthetic matrices."""

import numpy as np

from randsketch import cqrrpt, rsvd
from randsketch.linalg import frobenius_norm, svd_small

rng = np.random.default_rng(0)

# a 300 x 120 matrix whose singular values halve at every step
u, _ = np.linalg.qr(rng.standard_normal((300, 120)))
v, _ = np.linalg.qr(rng.standard_normal((120, 120)))
a = (u * 0.5 ** np.arange(120)) @ v.T

s = svd_small(a)[1]
for k in (2, 5, 10):
    approx = rsvd(a, k, seed=1).reconstruct()
    best = np.sqrt(np.sum(s[k:] ** 2))
    print(f"rank {k:2d}: rsvd error {frobenius_norm(a - approx):.3e}  optimal {best:.3e}")

# tall matrix with a duplicated block of columns: numerical rank is 30
b = rng.standard_normal((5000, 30))
b = np.hstack([b, b[:, :10]])
res = cqrrpt(b, rank_tol=1e-10, seed=2)
q, r = res.q, res.r_mat
print("cqrrpt rank:", res.rank, "of", b.shape[1])
print("orthogonality ||Q^T Q - I||:", frobenius_norm(q.T @ q - np.eye(res.rank)))
print("reconstruction:", frobenius_norm(b[:, res.pivots] - q @ r) / frobenius_norm(b))
