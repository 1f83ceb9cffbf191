"""Central finite-difference checks for layer backward passes."""

from __future__ import annotations

import numpy as np


def half_sq_loss(layer, x) -> float:
    y = layer.forward(x)
    return 0.5 * float(np.sum(y * y))


def numerical_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr``
    (perturbed in place and restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def check_layer_gradients(layer, x, h: float = 1e-5) -> dict[str, float]:
    """Relative error of every analytic gradient of ``0.5 * |forward(x)|^2``
    (all parameters plus ``"x"``) against central differences."""
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    grad_x, grads = layer.backward(x, y)
    errors = {}
    for name, p in layer.params().items():
        num = numerical_grad(lambda: half_sq_loss(layer, x), p, h)
        errors[name] = rel_error(grads[name], num)
    num_x = numerical_grad(lambda: half_sq_loss(layer, x), x, h)
    errors["x"] = rel_error(grad_x, num_x)
    return errors
