"""Minimal dense-tensor core with reverse-mode autodiff and Adam."""

from .core import (
    ConstantTape,
    Tensor,
    abs_,
    add,
    concat,
    constant,
    corrupt_backward,
    cross_entropy_logits,
    detach,
    div,
    embedding,
    exp,
    freeze,
    gelu,
    getitem,
    grad_enabled,
    l1_loss,
    layer_norm,
    log,
    log1p,
    log_softmax,
    matmul,
    mean,
    mse_loss,
    mul,
    neg,
    no_grad,
    record_constants,
    relu,
    replay_constants,
    reshape,
    sigmoid,
    softmax,
    square,
    stable_kernels,
    stack,
    sub,
    sum_,
    tanh,
    tensor,
    transpose,
)
from .optim import Adam, adam_update

__all__ = [name for name in dir() if not name.startswith("_")]
