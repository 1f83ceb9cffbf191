from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamCount:
    learnable: int
    total_stored: int
    dense_equivalent: int

    @property
    def exceeds_dense(self) -> bool:
        return self.total_stored > self.dense_equivalent


class Layer:
    """Common surface of every layer.

    ``params()`` returns the learnable arrays by name (the live arrays, so
    in-place updates take effect).  ``backward`` returns the input gradient
    and a dict of parameter gradients keyed like ``params()``.
    """

    kind: str = "Layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, grad_out):
        raise NotImplementedError

    def param_count(self) -> ParamCount:
        n = sum(p.size for p in self.params().values())
        return ParamCount(n, n, n)

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        return itemsize * sum(p.size for p in self.params().values())

    def config(self) -> dict:
        """JSON-serializable hyperparameters (everything except arrays)."""
        return {}

    def sketches(self) -> dict:
        return {}

    def __call__(self, x):
        return self.forward(x)


class ReLU(Layer):
    """Elementwise max(0, x); parameter-free."""

    kind = "ReLU"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, grad_out):
        return grad_out * (np.asarray(x) > 0), {}

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        return 2 * itemsize * int(np.prod(input_shape))

    def copy(self) -> "ReLU":
        return ReLU()

    def astype(self, dtype) -> "ReLU":
        return ReLU()
