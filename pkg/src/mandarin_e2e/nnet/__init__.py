"""Minimal differentiable kernels, layer stacks and the Adam optimizer."""
from .autograd import Tensor, no_grad
from .layers import (
    LayerSpec,
    ShapeError,
    BackwardError,
    backward,
    count_params,
    forward,
    init_weights,
    output_shape,
    stack_output_shape,
    time_pool_np as time_pool,
)
from .optim import OptimizerState, adam_step, lr_at

__all__ = [
    "Tensor",
    "no_grad",
    "LayerSpec",
    "ShapeError",
    "BackwardError",
    "backward",
    "count_params",
    "forward",
    "init_weights",
    "output_shape",
    "stack_output_shape",
    "time_pool",
    "OptimizerState",
    "adam_step",
    "lr_at",
]
