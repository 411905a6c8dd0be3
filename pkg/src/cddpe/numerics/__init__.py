"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .tensor import (Tensor, as_tensor, float64_shadow, grad_enabled,
                     no_grad, shadow_active)
from .functional import (
    abs_,
    add,
    batch_gather,
    batch_scatter,
    complex_mul,
    concat,
    conv2d,
    conv_transpose2d,
    depthwise_conv3x3,
    div,
    fft2,
    gelu,
    grid_warp,
    ifft2,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    real_part,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_,
    topk_select,
    transpose,
)

__all__ = [
    "Tensor", "as_tensor", "float64_shadow", "grad_enabled", "no_grad", "shadow_active",
    "abs_", "add", "batch_gather", "batch_scatter", "complex_mul", "concat",
    "conv2d", "conv_transpose2d", "depthwise_conv3x3", "div", "fft2", "gelu",
    "grid_warp", "ifft2", "matmul", "mean", "mul", "narrow", "neg",
    "real_part", "reshape", "sigmoid", "softmax", "sub", "sum_",
    "topk_select", "transpose",
]
