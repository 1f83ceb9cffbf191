"""A sketched linear layer is an unbiased, noisier copy of the dense one.

Averaging over sketch seeds recovers the dense output, and using more
terms ``l`` shrinks the spread roughly as 1/l.
"""

import numpy as np

from randsketch.nn import DenseLinear, sk_linear_from_dense

dense = DenseLinear.init(32, 16, seed=0)
x = np.random.default_rng(1).standard_normal((32, 1))
y = dense.forward(x)[:, 0]

for l in (1, 2, 4):
    outs = np.array([
        sk_linear_from_dense(dense.weight, dense.bias, l, 4, seed=s).forward(x)[:, 0] for s in range(2000)
    ])
    bias = np.abs(outs.mean(axis=0) - y).max()
    print(f"l={l}: max |mean - dense| {bias:.3f}   mean variance {outs.var(axis=0).mean():.3f}")

layer = sk_linear_from_dense(dense.weight, dense.bias, 1, 4, seed=0)
pc = layer.param_count()
print(f"stored {pc.total_stored} numbers vs {pc.dense_equivalent} dense (learnable {pc.learnable})")
