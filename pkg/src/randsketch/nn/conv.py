"""2-D convolution lowered to matrix products (im2col).

Images are ``C x H x W`` (single) or ``B x C x H x W`` (batch).  The lowered
patch matrix has one row per ``(channel, kh, kw)`` triple in row-major order
and one column per output position, batch-major then row-major over the
output grid.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..linalg import ShapeError
from ..rng import Stream
from ..sketch import Dist
from .base import Layer, ParamCount
from .linear import SkLinear

__all__ = ["im2col", "col2im", "conv_output_size", "DenseConv2d", "SkConv2d", "sk_conv2d_forward"]


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded image {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or B x C x H x W input, got {x.shape}")
    return x, False


def _im2col_batch(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh, ow = conv_output_size(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # win: B, C, OH, OW, KH, KW -> C, KH, KW, B, OH, OW
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, b * oh * ow)


def im2col(x, kernel_h: int, kernel_w: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    xb, _ = _batched(x)
    return _im2col_batch(xb, kernel_h, kernel_w, stride, padding)


def col2im(cols, image_shape, kernel_h: int, kernel_w: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to a
    ``B x C x H x W`` array."""
    b, c, h, w = image_shape
    oh, ow = conv_output_size(h, w, kernel_h, kernel_w, stride, padding)
    cols = np.asarray(cols).reshape(c, kernel_h, kernel_w, b, oh, ow)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel_h):
        for j in range(kernel_w):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


class _ConvBase(Layer):
    c_in: int
    c_out: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int

    def _lower(self, x):
        xb, single = _batched(x)
        if xb.shape[1] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {xb.shape[1]}")
        oh, ow = conv_output_size(xb.shape[2], xb.shape[3], self.kernel_h, self.kernel_w, self.stride, self.padding)
        return xb, single, _im2col_batch(xb, self.kernel_h, self.kernel_w, self.stride, self.padding), oh, ow

    def _lift(self, y, b, oh, ow, single):
        out = np.ascontiguousarray(y.reshape(self.c_out, b, oh, ow).transpose(1, 0, 2, 3))
        return out[0] if single else out

    def _grad_to_cols(self, grad_out, b, oh, ow):
        g, _ = _batched(grad_out)
        if g.shape != (b, self.c_out, oh, ow):
            raise ShapeError(f"grad_out shape {g.shape} != {(b, self.c_out, oh, ow)}")
        return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(self.c_out, b * oh * ow)

    def _conv_config(self):
        return {
            "c_in": self.c_in,
            "c_out": self.c_out,
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
            "stride": self.stride,
            "padding": self.padding,
        }

    def memory_estimate(self, input_shape, itemsize: int = 8) -> int:
        shape = tuple(input_shape)
        if len(shape) == 3:
            shape = (1,) + shape
        b, c, h, w = shape
        oh, ow = conv_output_size(h, w, self.kernel_h, self.kernel_w, self.stride, self.padding)
        patches = b * oh * ow
        work = b * c * h * w + self.c_in * self.kernel_h * self.kernel_w * patches + 2 * self.c_out * patches
        return itemsize * (self.param_count().total_stored + work)


class DenseConv2d(_ConvBase):
    kind = "DenseConv2d"

    def __init__(self, weight, bias=None, stride: int = 1, padding: int = 0):
        self.weight = np.array(weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError("conv weight must be c_out x c_in x kh x kw")
        self.c_out, self.c_in, self.kernel_h, self.kernel_w = self.weight.shape
        self.bias = np.zeros(self.c_out) if bias is None else np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (self.c_out,):
            raise ShapeError("bias shape mismatch")
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, c_in, c_out, kernel, stride=1, padding=0, seed=0) -> "DenseConv2d":
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        fan = c_in * kh * kw
        std = np.sqrt(2.0 / (fan + c_out))
        w = Stream(seed).normal(c_out * fan).reshape(c_out, c_in, kh, kw) * std
        return cls(w, np.zeros(c_out), stride, padding)

    @property
    def weight_matrix(self) -> np.ndarray:
        return self.weight.reshape(self.c_out, -1)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        xb, single, cols, oh, ow = self._lower(x)
        y = self.weight_matrix @ cols + self.bias[:, None]
        return self._lift(y, xb.shape[0], oh, ow, single)

    def backward(self, x, grad_out):
        xb, single, cols, oh, ow = self._lower(x)
        g = self._grad_to_cols(grad_out, xb.shape[0], oh, ow)
        grad_w = (g @ cols.T).reshape(self.weight.shape)
        grad_cols = self.weight_matrix.T @ g
        gx = col2im(grad_cols, xb.shape, self.kernel_h, self.kernel_w, self.stride, self.padding)
        return (gx[0] if single else gx), {"weight": grad_w, "bias": g.sum(axis=1)}

    def param_count(self):
        n = self.weight.size + self.bias.size
        return ParamCount(n, n, n)

    def config(self):
        return self._conv_config()

    def copy(self) -> "DenseConv2d":
        return DenseConv2d(self.weight.copy(), self.bias.copy(), self.stride, self.padding)

    def astype(self, dtype) -> "DenseConv2d":
        out = self.copy()
        out.weight = out.weight.astype(dtype)
        out.bias = out.bias.astype(dtype)
        return out


class SkConv2d(_ConvBase):
    """Convolution whose lowered weight matrix is a :class:`SkLinear`."""

    kind = "SkConv2d"

    def __init__(self, c_in, c_out, kernel_h, kernel_w, inner: SkLinear, stride: int = 1, padding: int = 0):
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.kernel_h, self.kernel_w = int(kernel_h), int(kernel_w)
        self.stride, self.padding = int(stride), int(padding)
        if inner.d_in != c_in * kernel_h * kernel_w or inner.d_out != c_out:
            raise ShapeError("inner sketched layer does not match the lowered conv shape")
        self.inner = inner

    @classmethod
    def init(cls, c_in, c_out, kernel, num_terms=1, low_rank=8, stride=1, padding=0, seed=0, dist=Dist.GAUSSIAN):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        inner = SkLinear.init(c_in * kh * kw, c_out, num_terms, low_rank, seed, dist)
        return cls(c_in, c_out, kh, kw, inner, stride, padding)

    @classmethod
    def from_dense(cls, conv: DenseConv2d, num_terms: int, low_rank: int, seed: int = 0, dist=Dist.GAUSSIAN):
        inner = SkLinear.from_dense(conv.weight_matrix, conv.bias, num_terms, low_rank, seed, dist)
        return cls(conv.c_in, conv.c_out, conv.kernel_h, conv.kernel_w, inner, conv.stride, conv.padding)

    @property
    def num_terms(self) -> int:
        return self.inner.num_terms

    @property
    def low_rank(self) -> int:
        return self.inner.low_rank

    def params(self):
        return self.inner.params()

    def sketches(self):
        return self.inner.sketches()

    def forward(self, x):
        xb, single, cols, oh, ow = self._lower(x)
        return self._lift(self.inner.forward(cols), xb.shape[0], oh, ow, single)

    def backward(self, x, grad_out):
        xb, single, cols, oh, ow = self._lower(x)
        g = self._grad_to_cols(grad_out, xb.shape[0], oh, ow)
        grad_cols, grads = self.inner.backward(cols, g)
        gx = col2im(grad_cols, xb.shape, self.kernel_h, self.kernel_w, self.stride, self.padding)
        return (gx[0] if single else gx), grads

    def param_count(self):
        return self.inner.param_count()

    def config(self):
        cfg = self._conv_config()
        cfg.update({k: v for k, v in self.inner.config().items() if k not in ("d_in", "d_out")})
        return cfg

    def copy(self) -> "SkConv2d":
        return SkConv2d(self.c_in, self.c_out, self.kernel_h, self.kernel_w, self.inner.copy(), self.stride, self.padding)

    def astype(self, dtype) -> "SkConv2d":
        out = self.copy()
        out.inner = self.inner.astype(dtype)
        return out


def sk_conv2d_forward(layer: SkConv2d, x) -> np.ndarray:
    return layer.forward(x)
