"""Dense layers and their sketched drop-in replacements."""

from .attention import (
    ExactMha,
    Kernel,
    RandMha,
    exact_mha_forward,
    feature_map,
    memory_estimate,
    rand_mha_forward,
)
from .base import Layer, ParamCount, ReLU
from .conv import DenseConv2d, SkConv2d, col2im, conv_output_size, im2col, sk_conv2d_forward
from .linear import (
    DenseLinear,
    SkLinear,
    SkTerm,
    dense_linear_forward,
    sk_linear_backward,
    sk_linear_forward,
    sk_linear_from_dense,
    skip_rule_exceeds,
)
from .model import Model, ModelFormatError, model_load, model_save


def param_count(layer) -> ParamCount:
    return layer.param_count()


__all__ = [
    "DenseConv2d",
    "DenseLinear",
    "ExactMha",
    "Kernel",
    "Layer",
    "Model",
    "ModelFormatError",
    "ParamCount",
    "RandMha",
    "ReLU",
    "SkConv2d",
    "SkLinear",
    "SkTerm",
    "col2im",
    "conv_output_size",
    "dense_linear_forward",
    "exact_mha_forward",
    "feature_map",
    "im2col",
    "memory_estimate",
    "model_load",
    "model_save",
    "param_count",
    "rand_mha_forward",
    "sk_conv2d_forward",
    "sk_linear_backward",
    "sk_linear_forward",
    "sk_linear_from_dense",
    "skip_rule_exceeds",
]
