"""Two-exit GhostNet: an early room-occupancy head and a final activity head.

The backbone follows the GhostNet stage table. Stages ``[0, branch_point)``
plus the stem form the shared trunk; the early head reads its output. The
remaining stages, a 1x1 ConvBnAct and the final head complete the full path.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import ops
from ..labels import EARLY_EXIT_LABELS, HAR_CLASSES, ROD_CLASSES
from ..tensor import DimensionError, Tensor, no_grad
from .ghost import GhostBottleneck, GhostBottleneckCfg
from .layers import Conv2d, ConvBnAct, Linear, Module, Sequential, make_divisible

# kernel, expansion width, output width, SE reduction (0 = none), stride
GHOSTNET_STAGES = (
    ((3, 16, 16, 0, 1),),
    ((3, 48, 24, 0, 2),),
    ((3, 72, 24, 0, 1),),
    ((5, 72, 40, 4, 2),),
    ((5, 120, 40, 4, 1),),
    ((3, 240, 80, 0, 2),),
    ((3, 200, 80, 0, 1), (3, 184, 80, 0, 1), (3, 184, 80, 0, 1), (3, 480, 112, 4, 1), (3, 672, 112, 4, 1)),
    ((5, 672, 160, 4, 2),),
    ((5, 960, 160, 0, 1), (5, 960, 160, 4, 1), (5, 960, 160, 0, 1), (5, 960, 160, 4, 1)),
)

EXPECTED_CONV_LAYERS = 97
EXPECTED_FC_LAYERS = 2
MAC_BUDGET = (310_000_000, 430_000_000)


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class BranchyConfig:
    width: float = 1.35
    branch_point: int = 6
    in_channels: int = 3
    input_hw: tuple = (234, 300)
    stem_channels: int = 16
    final_channels: int = 960
    head_hidden: int = 1280
    early_expansion: int = 4
    early_hidden: int = 640
    rod_classes: int = len(ROD_CLASSES)
    har_classes: int = len(HAR_CLASSES)
    stages: tuple = GHOSTNET_STAGES

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BranchyConfig":
        raw = json.loads(text)
        raw["input_hw"] = tuple(raw["input_hw"])
        raw["stages"] = tuple(tuple(tuple(b) for b in stage) for stage in raw["stages"])
        return cls(**raw)


@dataclass
class InferenceOutcome:
    exited_early: bool
    rod_probs: np.ndarray
    rod_label: int
    har_probs: Optional[np.ndarray] = None
    har_label: Optional[int] = None
    stage_timings: dict = field(default_factory=dict)

    @property
    def rod_name(self) -> str:
        return ROD_CLASSES[self.rod_label]

    @property
    def har_name(self) -> Optional[str]:
        return None if self.har_label is None else HAR_CLASSES[self.har_label]

    @property
    def latency_ns(self) -> int:
        return sum(self.stage_timings.values())


class EarlyHead(Module):
    """1x1 ConvBnAct -> global pool -> 1x1 conv head -> FC(rod classes)."""

    def __init__(self, in_channels: int, mid_channels: int, hidden: int, classes: int, rng=None) -> None:
        super().__init__()
        self.expand = ConvBnAct(in_channels, mid_channels, 1, rng=rng)
        self.conv_head = Conv2d(mid_channels, hidden, 1, bias=True, rng=rng)
        self.classifier = Linear(hidden, classes, rng=rng)

    def forward(self, x):
        x = ops.global_avg_pool(self.expand(x), keepdims=True)
        x = ops.relu(self.conv_head(x))
        return self.classifier(ops.flatten(x))

    def trace(self, shape, acct):
        shape = self.expand.trace(shape, acct)
        shape = self.conv_head.trace((shape[0], shape[1], 1, 1), acct)
        return self.classifier.trace((shape[0], shape[1]), acct)


class FinalHead(Module):
    """Global pool -> 1x1 conv head -> FC(activity classes)."""

    def __init__(self, in_channels: int, hidden: int, classes: int, rng=None) -> None:
        super().__init__()
        self.conv_head = Conv2d(in_channels, hidden, 1, bias=True, rng=rng)
        self.classifier = Linear(hidden, classes, rng=rng)

    def forward(self, x):
        x = ops.relu(self.conv_head(ops.global_avg_pool(x, keepdims=True)))
        return self.classifier(ops.flatten(x))

    def trace(self, shape, acct):
        shape = self.conv_head.trace((shape[0], shape[1], 1, 1), acct)
        return self.classifier.trace((shape[0], shape[1]), acct)


class BranchyGhostNet(Module):
    SEGMENTS = ("shared", "early_head", "rest", "final_head")

    def __init__(self, config: BranchyConfig, seed: int = 0) -> None:
        super().__init__()
        if config.width <= 0:
            raise BuildError(f"width multiplier must be positive, got {config.width}")
        if not 0 <= config.branch_point <= len(config.stages):
            raise BuildError(f"branch_point {config.branch_point} outside 0..{len(config.stages)}")
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.width

        stem_out = make_divisible(config.stem_channels * w, 4)
        stem = ConvBnAct(config.in_channels, stem_out, 3, stride=2, rng=rng)
        channels = stem_out
        stages = []
        for stage in config.stages:
            blocks = []
            for k, exp, out, se, stride in stage:
                cfg = GhostBottleneckCfg.from_channels(
                    channels, make_divisible(exp * w, 4), make_divisible(out * w, 4),
                    dw_kernel=k, stride=stride, se_reduction=se or None,
                )
                blocks.append(GhostBottleneck(cfg, rng=rng))
                channels = cfg.out_channels
            stages.append(Sequential(*blocks))
            if len(stages) == config.branch_point:
                branch_channels = channels
        if config.branch_point == 0:
            branch_channels = stem_out

        final_out = make_divisible(config.final_channels * w, 4)
        self.shared = Sequential(stem, *stages[:config.branch_point])
        self.rest = Sequential(*stages[config.branch_point:], ConvBnAct(channels, final_out, 1, rng=rng))
        self.early_head = EarlyHead(branch_channels, branch_channels * config.early_expansion,
                                    config.early_hidden, config.rod_classes, rng=rng)
        self.final_head = FinalHead(final_out, config.head_hidden, config.har_classes, rng=rng)

    # input contract ------------------------------------------------------

    def check_input(self, x: Tensor) -> None:
        want = (self.config.in_channels, *self.config.input_hw)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"expected input N x {want[0]} x {want[1]} x {want[2]}, got {x.shape}")

    # forward paths -------------------------------------------------------

    def forward_full(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Both heads; the shared trunk runs once."""
        self.check_input(x)
        h = self.shared(x)
        rod = self.early_head(h)
        har = self.final_head(self.rest(h))
        return rod, har

    def forward(self, x):
        return self.forward_full(x)

    def forward_with_exit(self, x: Tensor, path: str = "auto") -> InferenceOutcome:
        """Single-sample inference that stops after the early head when ROD argmax is 0 or 2.

        ``path="early"`` always stops there and ``path="full"`` never does,
        for controlled latency comparisons.
        """
        if path not in ("auto", "early", "full"):
            raise ValueError(f"path must be auto, early or full, got {path!r}")
        self.check_input(x)
        if x.shape[0] != 1:
            raise DimensionError(f"forward_with_exit takes a single sample, got batch {x.shape[0]}")
        clock = time.perf_counter_ns
        timings = {}
        with no_grad():
            t0 = clock()
            h = self.shared(x)
            t1 = clock()
            rod_logits = self.early_head(h)
            t2 = clock()
            timings["shared"], timings["early_head"] = t1 - t0, t2 - t1
            rod_probs = ops.softmax(rod_logits)[0]
            rod_label = int(np.argmax(rod_logits.data[0]))
            stop = path == "early" or (path == "auto" and rod_label in EARLY_EXIT_LABELS)
            if stop:
                return InferenceOutcome(True, rod_probs, rod_label, stage_timings=timings)
            t3 = clock()
            har_logits = self.final_head(self.rest(h))
            timings["rest_and_final"] = clock() - t3
        har_probs = ops.softmax(har_logits)[0]
        return InferenceOutcome(False, rod_probs, rod_label, har_probs, int(np.argmax(har_logits.data[0])), timings)


def build_branchy_ghostnet(width_multiplier: float = 1.35, branch_point: int = 6, seed: int = 0,
                           strict: bool = True, **overrides) -> BranchyGhostNet:
    """Build the network; with ``strict`` the 97-conv / 2-FC structure is enforced."""
    config = BranchyConfig(width=width_multiplier, branch_point=branch_point, **overrides)
    return build_from_config(config, seed=seed, strict=strict)


def build_from_config(config: BranchyConfig, seed: int = 0, strict: bool = True) -> BranchyGhostNet:
    from .accounting import count_layers

    model = BranchyGhostNet(config, seed=seed)
    if strict:
        counts = count_layers(model)
        if (counts.conv, counts.fc) != (EXPECTED_CONV_LAYERS, EXPECTED_FC_LAYERS):
            raise BuildError(
                f"structure has {counts.conv} conv and {counts.fc} fully connected layers, "
                f"expected {EXPECTED_CONV_LAYERS} and {EXPECTED_FC_LAYERS}"
            )
    return model


def to_model_input(images, channels: int = 3) -> Tensor:
    """Stack single-channel radio images (H x W or N x H x W) into N x channels x H x W."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected H x W or N x H x W images, got shape {arr.shape}")
    return Tensor(np.repeat(arr[:, None], channels, axis=1))
