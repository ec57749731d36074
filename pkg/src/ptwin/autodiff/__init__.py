"""Dense tensors with reverse-mode automatic differentiation."""

from . import functional
from .checkpoint import load_weights, save_weights
from .gradcheck import gradcheck, numerical_grad, relative_error
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step, cosine_warmup_lr
from .tensor import Tape, Tensor, backward, concat, no_grad, tensor

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "LayerNorm", "Linear", "Module",
    "Parameter", "Tape", "Tensor", "adam_step", "backward", "concat", "cosine_warmup_lr",
    "functional", "gradcheck", "load_weights", "no_grad", "numerical_grad",
    "relative_error", "save_weights", "tensor",
]
