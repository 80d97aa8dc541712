"""Minimal dense-tensor engine with reverse-mode autodiff."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    absolute,
    add,
    concat,
    constant_matmul,
    conv2d,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_rows,
    softmax_rows,
    sub,
    take_rows,
    transpose,
    upsample_bilinear,
)
from .params import CheckpointError, Parameter, ParameterRegistry
from .tensor import DEFAULT_DTYPE, NumericError, ShapeError, Tensor, as_tensor


def backward(loss: Tensor) -> None:
    loss.backward()


__all__ = [
    "CheckpointError",
    "constant_matmul",
    "DEFAULT_DTYPE",
    "GradCheckReport",
    "NumericError",
    "Parameter",
    "ParameterRegistry",
    "ShapeError",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "gelu",
    "grad_check",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "ops",
    "relu",
    "reshape",
    "sigmoid",
    "slice_rows",
    "softmax_rows",
    "sub",
    "take_rows",
    "transpose",
    "upsample_bilinear",
]
