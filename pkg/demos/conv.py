"""Convolution through im2col, dense and sketched."""

import numpy as np

from randsketch.nn import DenseConv2d, SkConv2d, im2col

img = np.random.default_rng(0).standard_normal((3, 8, 8))
cols = im2col(img, 3, 3, stride=1, padding=1)
print("im2col columns:", cols.shape)  # (3*3*3, 8*8)

conv = DenseConv2d.init(3, 16, 3, stride=1, padding=1, seed=1)
ref = conv.forward(img)
print("dense output:", ref.shape)

mean = np.mean([SkConv2d.from_dense(conv, 2, 4, seed=s).forward(img) for s in range(500)], axis=0)
print("relative gap of the seed average:", np.linalg.norm(mean - ref) / np.linalg.norm(ref))
