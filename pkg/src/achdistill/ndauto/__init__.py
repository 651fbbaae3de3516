"""Minimal dense tensors with reverse-mode autodiff, Adam and a few layers."""

from .tensor import (
    Tensor,
    tensor,
    no_grad,
    is_grad_enabled,
    backward,
    add,
    sub,
    mul,
    div,
    neg,
    matmul,
    exp,
    log,
    relu,
    tanh,
    square,
    sqrt,
    softplus,
    clip,
    minimum,
    maximum,
    where,
    concat,
    stack,
    logsumexp,
    log_softmax,
    softmax,
    getitem,
)
from .nn import layer_norm, l2_normalize, linear, conv2d, fan_in_init, orthogonal_init
from .optim import AdamState, adam_step, global_norm, NonFiniteGradientError
from .distributions import Categorical
from .gradcheck import check_gradients, numerical_grad, relative_error

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "relu",
    "tanh",
    "square",
    "sqrt",
    "softplus",
    "clip",
    "minimum",
    "maximum",
    "where",
    "concat",
    "stack",
    "logsumexp",
    "log_softmax",
    "softmax",
    "getitem",
    "layer_norm",
    "l2_normalize",
    "linear",
    "conv2d",
    "fan_in_init",
    "orthogonal_init",
    "AdamState",
    "adam_step",
    "global_norm",
    "NonFiniteGradientError",
    "Categorical",
    "check_gradients",
    "numerical_grad",
    "relative_error",
]
