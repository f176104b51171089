"""Minimal dense-tensor compute with reverse-mode gradients and Adam."""

from .gradcheck import grad_check
from .params import (
    NonFiniteGradientError,
    ParameterStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    truncated_normal,
)
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    attention,
    backward,
    binary_cross_entropy,
    causal_mask,
    clip,
    concat,
    div,
    embedding,
    exp,
    gelu,
    grad_enabled,
    index,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
