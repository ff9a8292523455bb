"""Reverse-mode autodiff core: tensors, layers, losses, optimizer, checkpoints."""

from gseal.gradcore.checkpoint import assign_weights, load_weights, save_weights
from gseal.gradcore.functional import (
    conv2d,
    global_avg_pool,
    instance_norm,
    linear,
    resize_bilinear,
    upsample_nearest2x,
)
from gseal.gradcore.losses import bce_with_logits, mse
from gseal.gradcore.optim import AdamW
from gseal.gradcore.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    custom_op,
    exp,
    log,
    matmul,
    relu,
    sigmoid,
    silu,
    softplus,
    sqrt,
    stack,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "custom_op",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "tanh",
    "relu",
    "silu",
    "softplus",
    "tsum",
    "tmean",
    "concat",
    "stack",
    "matmul",
    "linear",
    "conv2d",
    "instance_norm",
    "upsample_nearest2x",
    "global_avg_pool",
    "resize_bilinear",
    "bce_with_logits",
    "mse",
    "AdamW",
    "save_weights",
    "load_weights",
    "assign_weights",
]
