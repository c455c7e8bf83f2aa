"""Small deterministic reverse-mode autodiff engine used by every trainable stage."""

from .check import finite_diff_check, value_and_grad
from .optim import AdamState, StepLR, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    detach,
    div,
    evaluate,
    exp,
    expand_dims,
    gelu,
    get_default_dtype,
    getitem,
    layer_norm,
    log,
    log_softmax,
    logcumsumexp,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    swapaxes,
    take,
    tanh,
    transpose,
)

__all__ = [
    "AdamState", "NonFiniteError", "ShapeError", "StepLR", "Tape", "Tensor",
    "adam_step", "add", "as_tensor", "backward", "concat", "detach", "div", "evaluate",
    "exp", "expand_dims", "finite_diff_check", "gelu", "get_default_dtype", "getitem",
    "layer_norm", "log", "log_softmax", "logcumsumexp", "matmul", "mean", "mul", "neg",
    "relu", "reshape", "set_default_dtype", "softmax", "sqrt", "square", "stack", "sub",
    "sum_", "swapaxes", "take", "tanh", "transpose", "value_and_grad",
]
