"""Deterministic float64 autodiff layer: tensors, layers, losses and Adam."""

from .ops import (
    LOG_EPS,
    BatchNormState,
    batchnorm,
    concat_channels,
    conv2d,
    cross_entropy_soft,
    max_pool2x2,
    relu,
    softmax_channels,
    upsample_nearest2x,
)
from .optim import adam_step
from .tensor import DTYPE, Parameter, Tensor, add, backward, grad_enabled, mul, no_grad, stack_scalars, tsum

__all__ = [
    "DTYPE",
    "LOG_EPS",
    "BatchNormState",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batchnorm",
    "concat_channels",
    "conv2d",
    "cross_entropy_soft",
    "grad_enabled",
    "max_pool2x2",
    "mul",
    "no_grad",
    "relu",
    "softmax_channels",
    "stack_scalars",
    "tsum",
    "upsample_nearest2x",
]
