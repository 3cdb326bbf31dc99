from .ops import (
    conv3d,
    conv_output_extent,
    gelu,
    global_avg_pool,
    group_norm,
    l1_mean_distance,
    linear,
    softmax,
    softmax_cross_entropy,
)
from .tensor import Tensor, add, backward, concat, is_grad_enabled, mul, no_grad, reshape

__all__ = [
    "Tensor",
    "add",
    "backward",
    "concat",
    "conv3d",
    "conv_output_extent",
    "gelu",
    "global_avg_pool",
    "group_norm",
    "is_grad_enabled",
    "l1_mean_distance",
    "linear",
    "mul",
    "no_grad",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
]
