"""Numerical primitives with reverse-mode gradients."""

from .functional import (
    ShapeError,
    add,
    batch_norm,
    bilinear_resize,
    concat,
    conv2d,
    correlate,
    dropout,
    flip_hw,
    layer_norm,
    leaky_relu,
    max_normalized_exp,
    mean,
    mse_loss,
    mul,
    relu,
    reshape,
    roi_align,
    roi_pool,
    softmax,
    stack,
    sub,
    transpose,
)
from .gradcheck import grad_check
from .tensor import Tensor, as_tensor

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "batch_norm",
    "bilinear_resize",
    "concat",
    "conv2d",
    "correlate",
    "dropout",
    "flip_hw",
    "grad_check",
    "layer_norm",
    "leaky_relu",
    "max_normalized_exp",
    "mean",
    "mse_loss",
    "mul",
    "relu",
    "reshape",
    "roi_align",
    "roi_pool",
    "softmax",
    "stack",
    "sub",
    "transpose",
]
