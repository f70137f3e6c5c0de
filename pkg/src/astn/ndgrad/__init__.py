"""Minimal dense tensors with reverse-mode differentiation."""

from .ops import (
    ShapeError,
    add,
    concat,
    conv2d,
    elementwise,
    getitem,
    grid_sample,
    identity_grid,
    linear,
    mean,
    mse,
    mul,
    pool_down,
    relu,
    reshape,
    scale,
    sigmoid,
    square,
    sub,
    take,
    total,
    upsample2x,
)
from .tensor import GraphError, Tensor, tensor

__all__ = [
    "GraphError",
    "ShapeError",
    "Tensor",
    "add",
    "concat",
    "conv2d",
    "elementwise",
    "getitem",
    "grid_sample",
    "identity_grid",
    "linear",
    "mean",
    "mse",
    "mul",
    "pool_down",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "square",
    "sub",
    "take",
    "tensor",
    "total",
    "upsample2x",
]
