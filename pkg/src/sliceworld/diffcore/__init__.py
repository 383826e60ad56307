"""Differentiable-computation substrate: tape, parametric maps, gradients."""

from .tape import (
    Var,
    as_var,
    clip,
    concat,
    log_softmax,
    relu,
    sigmoid,
    softmax,
    softplus,
    stack,
    stop_gradient,
    take_rows,
    tanh,
    vabs,
)
from .store import ParamStore, load_checkpoint, save_checkpoint
from .maps import MapHandle, MapSpec, forward, layer_norm
from .fdcheck import check_gradients, finite_difference_gradients, grad

__all__ = [
    "Var", "as_var", "clip", "concat", "log_softmax", "relu", "sigmoid",
    "softmax", "softplus", "stack", "stop_gradient", "take_rows", "tanh",
    "vabs", "ParamStore", "load_checkpoint", "save_checkpoint",
    "MapHandle", "MapSpec", "forward", "layer_norm",
    "check_gradients", "finite_difference_gradients", "grad",
]
