"""Minimal differentiable-tensor substrate."""

from .functional import (
    dropout,
    layer_norm,
    linear,
    lstm_forward,
    mse_loss,
    multi_head_attention,
    multi_head_self_attention,
    softmax,
)
from .gradcheck import gradient_check, numerical_gradient, relative_error
from .optim import OptimizerState, ScheduleState, adamw_step, cosine_lr
from .tensor import Tensor, as_tensor, gelu, no_grad, relu, scatter_add

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "gelu",
    "relu",
    "scatter_add",
    "linear",
    "softmax",
    "layer_norm",
    "multi_head_attention",
    "multi_head_self_attention",
    "dropout",
    "mse_loss",
    "lstm_forward",
    "OptimizerState",
    "ScheduleState",
    "adamw_step",
    "cosine_lr",
    "gradient_check",
    "numerical_gradient",
    "relative_error",
]
