from . import tensor as F
from .module import MLP, LayerNorm, Linear, Module, Parameter, uniform_fan_in
from .optim import Adamax, AdamaxState, MissingGradientError, adamax_step
from .tensor import (
    Tape,
    Tensor,
    bce_loss,
    default_dtype,
    get_default_dtype,
    layer_norm,
    matmul,
    mse_loss,
    no_grad,
    set_debug,
    set_default_dtype,
    softmax,
)

__all__ = [
    "Adamax",
    "AdamaxState",
    "F",
    "LayerNorm",
    "Linear",
    "MLP",
    "MissingGradientError",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "adamax_step",
    "bce_loss",
    "default_dtype",
    "get_default_dtype",
    "layer_norm",
    "matmul",
    "mse_loss",
    "no_grad",
    "set_debug",
    "set_default_dtype",
    "softmax",
    "uniform_fan_in",
]
