"""Random-feature attention against exact softmax attention."""

import numpy as np

from randsketch.nn import ExactMha, RandMha

exact = ExactMha.init(16, 2, seed=3)
x = 0.5 * np.random.default_rng(0).standard_normal((32, 16))
ref = exact.forward(x)

for m in (16, 64, 256, 1024, 4096):
    out = RandMha.from_exact(exact, m, "softmax", seed=0).forward(x)
    print(f"m={m:5d}: relative error {np.linalg.norm(out - ref) / np.linalg.norm(ref):.3f}")

# memory model: exact grows with N^2, random features with N
for n in (1024, 4096, 16384):
    e = exact.memory_estimate((n, 16))
    r = RandMha.from_exact(exact, 64).memory_estimate((n, 16))
    print(f"N={n:6d}: exact {e / 2**20:8.1f} MiB   random features {r / 2**20:6.2f} MiB")
