"""Parameterized layers and a minimal module tree.

Modules discover parameters, buffers and children from their instance
attributes in definition order, so parameter names are stable and usable as
checkpoint keys. Every module also implements :meth:`Module.trace`, an
analytic shape walk that records ``("conv" | "fc", macs)`` entries without
touching any data.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .. import ops
from ..tensor import DimensionError, Tensor


def make_divisible(v: float, divisor: int = 4) -> int:
    n = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if n < 0.9 * v:
        n += divisor
    return n


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data.astype(np.float32), requires_grad=True)


class Module:
    training: bool = True

    def __init__(self) -> None:
        self.training = True
        self._buffers: list[str] = []

    # tree traversal -------------------------------------------------------

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype, order="C").reshape(p.shape)
        for name, buf in self.named_buffers():
            buf[...] = state[name]

    # modes ---------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m._buffers:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    # evaluation ----------------------------------------------------------

    def __call__(self, x: Tensor, **kwargs) -> Tensor:
        return self.forward(x, **kwargs)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def trace(self, shape: tuple, acct: list) -> tuple:
        raise NotImplementedError(type(self).__name__)


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def trace(self, shape, acct):
        for layer in self.layers:
            shape = layer.trace(shape, acct)
        return shape


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False, rng=None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        std = math.sqrt(2.0 / (in_channels * kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel)))
        self.bias = _param(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def trace(self, shape, acct):
        n, c, h, w = shape
        if c != self.in_channels:
            raise DimensionError(f"Conv2d expects {self.in_channels} channels, got {c}")
        ho = ops.out_size(h, self.kernel, self.stride, self.padding)
        wo = ops.out_size(w, self.kernel, self.stride, self.padding)
        acct.append(("conv", n * self.out_channels * ho * wo * c * self.kernel ** 2))
        return (n, self.out_channels, ho, wo)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, stride: int = 1, multiplier: int = 1, rng=None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels, self.kernel, self.stride, self.multiplier = channels, kernel, stride, multiplier
        self.padding = kernel // 2
        std = math.sqrt(2.0 / (kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (channels * multiplier, 1, kernel, kernel)))

    def forward(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.stride, self.padding, self.multiplier)

    def trace(self, shape, acct):
        n, c, h, w = shape
        if c != self.channels:
            raise DimensionError(f"DepthwiseConv2d expects {self.channels} channels, got {c}")
        k = self.channels * self.multiplier
        ho = ops.out_size(h, self.kernel, self.stride, self.padding)
        wo = ops.out_size(w, self.kernel, self.stride, self.padding)
        acct.append(("conv", n * k * ho * wo * self.kernel ** 2))
        return (n, k, ho, wo)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._buffers = ["running_mean", "running_var"]

    def forward(self, x, relu: bool = False):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps, relu=relu)

    def trace(self, shape, acct):
        return shape


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)

    def trace(self, shape, acct):
        return shape


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = _param(rng.normal(0.0, 0.01, (out_features, in_features)))
        self.bias = _param(np.zeros(out_features))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def trace(self, shape, acct):
        n, f = shape
        if f != self.in_features:
            raise DimensionError(f"Linear expects {self.in_features} features, got {f}")
        acct.append(("fc", n * self.in_features * self.out_features))
        return (n, self.out_features)


class ConvBnAct(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 act: bool = True, rng=None) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self.act = act

    def forward(self, x):
        return self.bn(self.conv(x), relu=self.act)

    def trace(self, shape, acct):
        return self.conv.trace(shape, acct)
