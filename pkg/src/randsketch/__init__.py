"""Randomized numerical linear algebra for neural-network layers.

Subpackages and modules:

- :mod:`randsketch.linalg` -- dense kernels (QR, pivoted QR, Cholesky, Jacobi SVD)
- :mod:`randsketch.sketch` -- seeded random sketching operators
- :mod:`randsketch.decomp` -- randomized SVD and CQRRPT
- :mod:`randsketch.nn` -- dense and sketched layers, model files
- :mod:`randsketch.tuner` -- sketch hyperparameter search
- :mod:`randsketch.bench` -- timing harness (CLI: ``randsketch``)
"""

from . import decomp, linalg, nn, sketch, tuner
from .decomp import cqrrpt, rsvd
from .sketch import Dist, SketchOp, make_sketch

__version__ = "0.1.0"

__all__ = ["decomp", "linalg", "nn", "sketch", "tuner", "cqrrpt", "rsvd", "Dist", "SketchOp", "make_sketch"]
