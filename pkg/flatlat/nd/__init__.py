"""Minimal dense-tensor core: tape autodiff, optimizers, schedules, RNG."""

from flatlat.nd.gradcheck import grad_check, grad_check_tensors
from flatlat.nd.optim import AdamWState, WsdSchedule, adamw_step, wsd_lr, zero_grad
from flatlat.nd.rng import RngStream, derive_seed
from flatlat.nd.tensor import (
    Tensor,
    concat,
    count_flops,
    layer_norm,
    matmul,
    no_grad,
    precision,
    softmax_lastdim,
    tensor,
)

__all__ = [
    "AdamWState",
    "RngStream",
    "Tensor",
    "WsdSchedule",
    "adamw_step",
    "concat",
    "count_flops",
    "derive_seed",
    "grad_check",
    "grad_check_tensors",
    "layer_norm",
    "matmul",
    "no_grad",
    "precision",
    "softmax_lastdim",
    "tensor",
    "wsd_lr",
    "zero_grad",
]
