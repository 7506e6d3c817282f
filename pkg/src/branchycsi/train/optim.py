"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ParameterError
from ..tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def optimizer_step(params: Sequence[Tensor], grads: Sequence, state: AdamState, lr: float,
                   betas: tuple = (0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """One AdamW update in place. Missing gradients count as zero.

    Decay is applied to the parameter directly (``p -= lr * wd * p``) before
    the moment-based step; it never enters the moments.
    """
    if not lr >= 0:
        raise ParameterError(f"learning rate must be nonnegative, got {lr}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p.data -= (lr * weight_decay * p.data.astype(np.float64)).astype(p.dtype)
        if g is None:
            g = 0.0
        else:
            g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas: tuple = (0.9, 0.999),
                 weight_decay: float = 0.05, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, tuple(betas), weight_decay, eps
        self.state = AdamState.zeros_like(self.params)

    def step(self) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                       self.betas, self.weight_decay, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(epoch: float, total_epochs: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_epochs <= 0:
        raise ParameterError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ParameterError(f"epoch {epoch} outside 0..{total_epochs}")
    if epoch == total_epochs:
        return float(min_lr)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / total_epochs))
