"""Minimal dense-tensor engine: forward operators plus reverse-mode autodiff."""

from .gradcheck import grad_check
from .ops import (
    add,
    concat,
    conv2d,
    conv2d_transpose,
    div,
    exp,
    group_norm,
    layer_norm,
    leaky_relu,
    matmul,
    mean,
    mul,
    neg,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    sqrt,
    sub,
    sum,
    transpose,
)
from .tensor import Tape, Tensor, active_tape, backward, tensor

__all__ = [
    "Tape", "Tensor", "tensor", "active_tape", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "pow_scalar", "sqrt", "exp",
    "sigmoid", "relu", "leaky_relu", "matmul", "reshape", "transpose",
    "concat", "slice_axis", "sum", "mean", "softmax",
    "conv2d", "conv2d_transpose", "group_norm", "layer_norm",
]
