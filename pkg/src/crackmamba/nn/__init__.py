"""Minimal reverse-mode tensors and layers."""
from . import functional
from .layers import Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import (
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Conv2d", "LayerNorm", "Linear", "Module", "Parameter", "Tensor", "as_tensor",
    "default_dtype", "functional", "get_default_dtype", "grad_enabled", "no_grad",
    "set_default_dtype",
]
