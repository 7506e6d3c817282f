"""Ghost module, squeeze-and-excitation gate and Ghost bottleneck."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .. import ops
from ..tensor import DimensionError
from .layers import BatchNorm2d, Conv2d, DepthwiseConv2d, Module, Sequential, make_divisible


@dataclass(frozen=True)
class GhostModuleCfg:
    in_channels: int
    intrinsic_channels: int
    ratio: int = 2
    primary_kernel: int = 1
    cheap_kernel: int = 3
    stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.intrinsic_channels * self.ratio


class GhostModule(Module):
    """Regular conv to a few intrinsic maps, then depthwise 'ghost' maps from them.

    With ``ratio == 1`` the cheap path is absent and the module is a plain
    conv + BN (+ ReLU).
    """

    def __init__(self, cfg: GhostModuleCfg, relu: bool = True, rng=None) -> None:
        super().__init__()
        if cfg.ratio < 1:
            raise ValueError("ghost ratio must be >= 1")
        self.cfg = cfg
        self.relu = relu
        self.primary = Conv2d(cfg.in_channels, cfg.intrinsic_channels, cfg.primary_kernel, cfg.stride, rng=rng)
        self.primary_bn = BatchNorm2d(cfg.intrinsic_channels)
        if cfg.ratio > 1:
            self.cheap = DepthwiseConv2d(cfg.intrinsic_channels, cfg.cheap_kernel, 1, cfg.ratio - 1, rng=rng)
            self.cheap_bn = BatchNorm2d(cfg.intrinsic_channels * (cfg.ratio - 1))
        else:
            self.cheap = None
            self.cheap_bn = None

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"ghost module expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        x1 = self.primary_bn(self.primary(x), relu=self.relu)
        if self.cheap is None:
            return x1
        x2 = self.cheap_bn(self.cheap(x1), relu=self.relu)
        return ops.concat([x1, x2], axis=1)

    def trace(self, shape, acct):
        shape = self.primary.trace(shape, acct)
        if self.cheap is None:
            return shape
        cheap = self.cheap.trace(shape, acct)
        return (shape[0], shape[1] + cheap[1], shape[2], shape[3])


class SqueezeExcite(Module):
    """Channel gate ``hard_sigmoid(W2 relu(W1 gap(x)))``; the FC pair are 1x1 convs."""

    def __init__(self, channels: int, reduction: int = 4, rng=None) -> None:
        super().__init__()
        self.channels = channels
        self.reduced = make_divisible(channels / reduction, 4)
        self.reduce = Conv2d(channels, self.reduced, 1, bias=True, rng=rng)
        self.expand = Conv2d(self.reduced, channels, 1, bias=True, rng=rng)

    def gate(self, x):
        g = ops.global_avg_pool(x, keepdims=True)
        g = ops.relu(self.reduce(g))
        return ops.hard_sigmoid(self.expand(g))

    def forward(self, x):
        return ops.mul(x, self.gate(x))

    def trace(self, shape, acct):
        n, c = shape[:2]
        pooled = self.reduce.trace((n, c, 1, 1), acct)
        self.expand.trace(pooled, acct)
        return shape


@dataclass(frozen=True)
class GhostBottleneckCfg:
    expansion: GhostModuleCfg
    projection: GhostModuleCfg
    stride: int = 1
    dw_kernel: int = 3
    se_reduction: Optional[int] = None

    @classmethod
    def from_channels(cls, in_channels: int, mid_channels: int, out_channels: int, dw_kernel: int = 3,
                      stride: int = 1, se_reduction: Optional[int] = None, ratio: int = 2) -> "GhostBottleneckCfg":
        if mid_channels % ratio or out_channels % ratio:
            raise ValueError(f"channel counts {mid_channels}/{out_channels} not divisible by ghost ratio {ratio}")
        return cls(
            expansion=GhostModuleCfg(in_channels, mid_channels // ratio, ratio),
            projection=GhostModuleCfg(mid_channels, out_channels // ratio, ratio),
            stride=stride,
            dw_kernel=dw_kernel,
            se_reduction=se_reduction,
        )

    @property
    def in_channels(self) -> int:
        return self.expansion.in_channels

    @property
    def mid_channels(self) -> int:
        return self.expansion.out_channels

    @property
    def out_channels(self) -> int:
        return self.projection.out_channels

    @property
    def identity_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


class GhostBottleneck(Module):
    def __init__(self, cfg: GhostBottleneckCfg, rng=None) -> None:
        super().__init__()
        if cfg.stride not in (1, 2):
            raise ValueError(f"bottleneck stride must be 1 or 2, got {cfg.stride}")
        if cfg.projection.in_channels != cfg.mid_channels:
            raise DimensionError("projection ghost module must consume the expansion output")
        self.cfg = cfg
        self.ghost1 = GhostModule(cfg.expansion, relu=True, rng=rng)
        if cfg.stride > 1:
            self.conv_dw = DepthwiseConv2d(cfg.mid_channels, cfg.dw_kernel, cfg.stride, rng=rng)
            self.bn_dw = BatchNorm2d(cfg.mid_channels)
        else:
            self.conv_dw = self.bn_dw = None
        self.se = SqueezeExcite(cfg.mid_channels, cfg.se_reduction, rng=rng) if cfg.se_reduction else None
        self.ghost2 = GhostModule(cfg.projection, relu=False, rng=rng)
        if cfg.identity_shortcut:
            self.shortcut = None
        else:
            self.shortcut = Sequential(
                DepthwiseConv2d(cfg.in_channels, cfg.dw_kernel, cfg.stride, rng=rng),
                BatchNorm2d(cfg.in_channels),
                Conv2d(cfg.in_channels, cfg.out_channels, 1, rng=rng),
                BatchNorm2d(cfg.out_channels),
            )

    def forward(self, x):
        residual = x if self.shortcut is None else self.shortcut(x)
        y = self.ghost1(x)
        if self.conv_dw is not None:
            y = self.bn_dw(self.conv_dw(y))
        if self.se is not None:
            y = self.se(y)
        y = self.ghost2(y)
        if y.shape != residual.shape:
            raise DimensionError(f"residual join: {y.shape} vs shortcut {residual.shape}")
        return ops.add(y, residual)

    def trace(self, shape, acct):
        y = self.ghost1.trace(shape, acct)
        if self.conv_dw is not None:
            y = self.conv_dw.trace(y, acct)
        if self.se is not None:
            y = self.se.trace(y, acct)
        y = self.ghost2.trace(y, acct)
        if self.shortcut is not None:
            r = self.shortcut.trace(shape, acct)
            if r != y:
                raise DimensionError(f"residual join: {y} vs shortcut {r}")
        return y
