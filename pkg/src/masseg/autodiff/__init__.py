"""Minimal float64 reverse-mode autodiff on top of numpy."""

from . import ops
from .ops import (
    add, concat, conv2d, cross_entropy, exp, gather, getitem, layer_norm, log,
    log_softmax, matmul, mean, mul, relu, reshape, resize_bilinear, roll, softmax,
    softmin, stack, sub, transpose, upsample_bilinear,
)
from .ops import sum as reduce_sum
from .optim import Adam, OptimizerState, adam_step
from .tensor import DTYPE, GraphError, NonFiniteError, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "ops", "Tensor", "as_tensor", "no_grad", "is_grad_enabled", "DTYPE",
    "GraphError", "NonFiniteError", "Adam", "OptimizerState", "adam_step",
    "add", "sub", "mul", "matmul", "relu", "exp", "log", "reduce_sum", "mean",
    "reshape", "transpose", "getitem", "concat", "stack", "roll", "gather",
    "softmax", "log_softmax", "softmin", "layer_norm", "conv2d",
    "resize_bilinear", "upsample_bilinear", "cross_entropy",
]
