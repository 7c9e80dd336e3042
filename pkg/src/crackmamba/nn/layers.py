"""Parameter containers and the small set of layers the blocks are built from."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable leaf tensor. ``frozen`` parameters are skipped by the optimizer."""

    __slots__ = ("name", "frozen", "tags")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or get_default_dtype())
        self.name = name
        self.frozen = False
        self.tags: set[str] = set()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Tree of named sub-modules and parameters, discovered from attributes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in self._children():
            full = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield full, val
            else:
                yield from val.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def tag(self, label: str) -> None:
        for p in self.parameters():
            p.tags.add(label)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng, (fan_out, fan_in), fan_in))
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        fan_in = (cin // groups) * kernel * kernel
        self.weight = Parameter(uniform_fan_in(rng, (cout, cin // groups, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_fan_in(rng, (cout,), fan_in)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    """Normalises over ``axis``: -1 for token tensors, 1 for NCHW maps."""

    def __init__(self, channels: int, axis: int = -1, eps: float = 1e-6):
        self.gain = Parameter(np.ones(channels))
        self.offset = Parameter(np.zeros(channels))
        self.axis, self.eps = axis, eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.offset, self.axis, self.eps)
