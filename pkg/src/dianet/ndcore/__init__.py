"""Minimal dense tensors, reverse-mode gradients, Adam, and a gradient checker."""

from .gradcheck import GradCheckReport, grad_check, grad_check_params, kink_margin, kink_pattern, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import (
    COSINE_EPS,
    Tensor,
    add,
    avg_pool2d,
    concat_lastdim,
    conv2d,
    cosine_similarity,
    dropout,
    flatten,
    log_softmax_lastdim,
    matmul,
    mean_over_axis,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    sum_,
    swapaxes,
)

__all__ = [
    "Adam",
    "AdamState",
    "COSINE_EPS",
    "GradCheckReport",
    "Tensor",
    "adam_step",
    "add",
    "avg_pool2d",
    "concat_lastdim",
    "conv2d",
    "cosine_similarity",
    "dropout",
    "flatten",
    "grad_check",
    "grad_check_params",
    "kink_margin",
    "kink_pattern",
    "log_softmax_lastdim",
    "matmul",
    "mean_over_axis",
    "mul",
    "neg",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_lastdim",
    "sum_",
    "swapaxes",
]
