"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    samples_per_param: int = 8,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the forward graph on every call and return a
    scalar tensor. For each parameter, up to ``samples_per_param`` coordinates
    are perturbed by ``±h``; the error for a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. The floor
    keeps coordinates whose true gradient is far below the central-difference
    roundoff (about ``eps * |loss| / h``) from dominating the maximum.
    """
    if not h > 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            picks = rng.choice(n, size=min(samples_per_param, n), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = float(grad.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
