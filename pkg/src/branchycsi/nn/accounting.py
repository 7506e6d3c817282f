"""Structural accounting: layer counts and multiply-accumulate totals.

MACs are derived from shapes alone: output elements x kernel volume x input
channels per group for convolutions, ``in x out`` for fully connected
layers. Normalization, activations and pooling are not counted.
"""

from __future__ import annotations

from typing import NamedTuple

from .layers import Conv2d, DepthwiseConv2d, Linear, Module


class LayerCount(NamedTuple):
    conv: int
    fc: int


def count_layers(model: Module) -> LayerCount:
    conv = fc = 0
    for m in model.modules():
        if isinstance(m, (Conv2d, DepthwiseConv2d)):
            conv += 1
        elif isinstance(m, Linear):
            fc += 1
    return LayerCount(conv, fc)


def conv_macs(out_h: int, out_w: int, out_channels: int, kernel: int, in_channels_per_group: int) -> int:
    return out_h * out_w * out_channels * kernel * kernel * in_channels_per_group


def fc_macs(in_features: int, out_features: int) -> int:
    return in_features * out_features


def trace_macs(module: Module, shape: tuple) -> tuple[tuple, int]:
    acct: list = []
    out = module.trace(tuple(shape), acct)
    return out, sum(m for _, m in acct)


def segment_macs(model, input_shape=None) -> dict:
    """Per-segment MACs of a branchy model for one sample."""
    if input_shape is None:
        input_shape = (model.config.in_channels, *model.config.input_hw)
    shape = (1, *input_shape)
    shared_out, shared = trace_macs(model.shared, shape)
    _, early = trace_macs(model.early_head, shared_out)
    rest_out, rest = trace_macs(model.rest, shared_out)
    _, final = trace_macs(model.final_head, rest_out)
    return {"shared": shared, "early_head": early, "rest": rest, "final_head": final}


def count_macs(model, input_shape=None) -> int:
    """Total MACs for one sample through every layer, both heads included."""
    if hasattr(model, "early_head"):
        return sum(segment_macs(model, input_shape).values())
    return trace_macs(model, (1, *input_shape))[1]


def path_macs(model, input_shape=None) -> dict:
    """Executed MACs of the early-exit path and of the full (non-exiting) path."""
    seg = segment_macs(model, input_shape)
    early = seg["shared"] + seg["early_head"]
    return {"early": early, "full": early + seg["rest"] + seg["final_head"]}
