"""Minimal layer containers over the functional ops."""
from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Tensor


def default_groups(channels: int, cap: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``cap``."""
    for g in range(min(cap, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def split_channels(total: int, parts: int) -> list:
    """Split ``total`` as evenly as possible, remainder to the first parts."""
    base, rem = divmod(total, parts)
    return [base + (i < rem) for i in range(parts)]


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, m in self._children.items():
            out.update(m.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """'Same'-padded convolution with He-uniform fan-in init."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 zero_init: bool = False, dtype=np.float32):
        super().__init__()
        self.k, self.stride = k, stride
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        w = np.zeros((cout, cin, k, k)) if zero_init else rng.uniform(-bound, bound, (cout, cin, k, k))
        self.weight = self.param("weight", w.astype(dtype))
        self.bias = self.param("bias", np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=(self.k - 1) // 2)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.groups = groups or default_groups(channels)
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        bound = math.sqrt(6.0 / fin)
        self.weight = self.param("weight", rng.uniform(-bound, bound, (fout, fin)).astype(dtype))
        self.bias = self.param("bias", np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class PyConv(Module):
    """Parallel 'same' convolutions of several kernel sizes, concatenated on channels."""

    def __init__(self, cin: int, cout: int, kernels, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.kernels = list(kernels)
        self.convs = [self.child(f"k{k}", Conv2d(cin, co, k, rng, dtype=dtype))
                      for k, co in zip(self.kernels, split_channels(cout, len(self.kernels)))]

    def forward(self, x: Tensor) -> Tensor:
        if len(self.convs) == 1:
            return self.convs[0](x)
        return ops.concat([conv(x) for conv in self.convs], axis=1)


def make_conv(cin: int, cout: int, kernels, rng, dtype=np.float32) -> Module:
    """A single conv for an int kernel, a :class:`PyConv` for a kernel list."""
    if isinstance(kernels, int):
        return Conv2d(cin, cout, kernels, rng, dtype=dtype)
    return PyConv(cin, cout, kernels, rng, dtype=dtype)


class ResBlock(Module):
    """conv -> GN -> ReLU -> conv -> GN, identity skip, ReLU.

    ``kernels1``/``kernels2`` are an int (plain conv) or a list (pyramidal conv).
    """

    def __init__(self, channels: int, kernels1, rng: np.random.Generator, kernels2=None, dtype=np.float32):
        super().__init__()
        kernels2 = kernels1 if kernels2 is None else kernels2
        self.conv1 = self.child("conv1", make_conv(channels, channels, kernels1, rng, dtype))
        self.norm1 = self.child("norm1", GroupNorm(channels, dtype=dtype))
        self.conv2 = self.child("conv2", make_conv(channels, channels, kernels2, rng, dtype))
        self.norm2 = self.child("norm2", GroupNorm(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return ops.relu(ops.add(h, x))
