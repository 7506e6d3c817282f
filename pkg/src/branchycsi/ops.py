"""Differentiable operators on :class:`~branchycsi.tensor.Tensor`.

Each function computes its forward result with numpy (or the compiled
kernels for the convolution hot loops) and registers a backward closure.
Reductions for pooling, batch statistics and the loss accumulate in float64
regardless of the storage dtype.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import (
    DimensionError,
    LabelError,
    NonFiniteError,
    Tensor,
    active_profile,
    as_tensor,
)

_cfg = threading.local()


def _checking() -> bool:
    return getattr(_cfg, "check_finite", False)


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NonFiniteError` from any op whose output is not finite."""
    prev = _checking()
    _cfg.check_finite = enabled
    try:
        yield
    finally:
        _cfg.check_finite = prev


def _emit(kind: str, data: np.ndarray, macs: int = 0) -> None:
    if _checking() and not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    prof = active_profile()
    if prof is not None:
        prof.record(kind, macs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# elementwise / structural ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _emit("add", out)
    return Tensor._from_op(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    _emit("mul", out)
    return Tensor._from_op(out, "mul", (a, b), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors Tensor.sum
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return Tensor._from_op(out, "sum", (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, "reshape", (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    _emit("concat", out)
    return Tensor._from_op(out, "concat", tensors, backward)


def take_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(out, "take_rows", (x,), backward)


# activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    _emit("relu", out)
    return Tensor._from_op(out, "relu", (x,), backward)


def hard_sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.clip((x.data + 3) / 6, 0, 1).astype(x.dtype, copy=False)

    def backward(g):
        inside = (x.data > -3) & (x.data < 3)
        return ((g * inside / 6).astype(x.dtype, copy=False),)

    _emit("hard_sigmoid", out)
    return Tensor._from_op(out, "hard_sigmoid", (x,), backward)


def global_avg_pool(x: Tensor, keepdims: bool = False) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N,C,H,W input, got {x.shape}")
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    if keepdims:
        out = out.reshape(N, C, 1, 1)

    def backward(g):
        g = g.reshape(N, C, 1, 1) / (H * W)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    _emit("global_avg_pool", out)
    return Tensor._from_op(out, "global_avg_pool", (x,), backward)


# linear algebra ----------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation) via im2col and a matrix product."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1 or padding < 0 or kh < 1 or kw < 1:
        raise ValueError("conv2d: need stride >= 1, padding >= 0, kernel >= 1")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    Ho, Wo = out_size(H, kh, stride, padding), out_size(W, kw, stride, padding)
    L = Ho * Wo
    dt = x.dtype
    w2 = weight.data.reshape(K, C * kh * kw)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs).reshape(N, C, L)
    else:
        cols = np.empty((N, C * kh * kw, L), dtype=dt)
        kernels.impl().im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding, Ho, Wo, cols)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, K, Ho, Wo)

    def backward(g):
        g3 = np.ascontiguousarray(g, dtype=dt).reshape(N, K, L)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape).astype(dt, copy=False)
        gb = g3.sum(axis=(0, 2), dtype=np.float64).astype(dt) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gcols = gcols.reshape(N, C, Ho, Wo)
                if stride == 1:
                    gx = gcols
                else:
                    gx = np.zeros(x.shape, dtype=dt)
                    gx[:, :, ::stride, ::stride] = gcols
            else:
                gx = np.zeros(x.shape, dtype=dt)
                kernels.impl().col2im(np.ascontiguousarray(gcols), kh, kw, stride, padding, Ho, Wo, gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    _emit("conv2d", out, N * K * L * C * kh * kw)
    return Tensor._from_op(out, "conv2d", parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, multiplier: int = 1) -> Tensor:
    """Per-channel convolution; output channel ``k`` reads input channel ``k // multiplier``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    K, one, kh, kw = weight.shape
    if one != 1 or K != C * multiplier:
        raise DimensionError(
            f"depthwise_conv2d: weight {weight.shape} does not match {C} input channels x multiplier {multiplier}"
        )
    if stride < 1 or padding < 0:
        raise ValueError("depthwise_conv2d: need stride >= 1, padding >= 0")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"depthwise_conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    Ho, Wo = out_size(H, kh, stride, padding), out_size(W, kw, stride, padding)
    dt = x.dtype
    xc = np.ascontiguousarray(x.data)
    w3 = np.ascontiguousarray(weight.data.reshape(K, kh, kw), dtype=dt)
    out = np.empty((N, K, Ho, Wo), dtype=dt)
    kernels.impl().dw_forward(xc, w3, stride, padding, multiplier, out)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dt)
        gw3 = np.empty_like(w3)
        kernels.impl().dw_backward_weight(xc, g, stride, padding, multiplier, gw3)
        gx = None
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=dt)
            kernels.impl().dw_backward_input(g, w3, stride, padding, multiplier, gx)
        return gx, gw3.reshape(weight.shape)

    _emit("depthwise_conv2d", out, N * K * Ho * Wo * kh * kw)
    return Tensor._from_op(out, "depthwise_conv2d", (x, weight), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    _emit("linear", out, x.shape[0] * weight.shape[0] * weight.shape[1])
    return Tensor._from_op(out, "linear", parents, backward)


# normalization -----------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean,
    running_var,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    relu: bool = False,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W), optionally fused with ReLU.

    In training mode ``running_mean`` / ``running_var`` (numpy arrays or
    tensors) are updated in place with the unbiased batch variance.
    """
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape} vs affine params {gamma.shape}, {beta.shape}")
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var
    N, C, H, W = x.shape
    dt = x.dtype
    m = N * H * W

    k = kernels.impl()
    xd = np.ascontiguousarray(x.data)
    g64 = gamma.data.astype(np.float64)
    out = np.empty_like(xd)
    if training:
        mean = np.empty(C)
        var = np.empty(C)
        k.bn_train_forward(xd, g64, beta.data.astype(np.float64), float(eps), relu, out, mean, var)
        inv_std = 1.0 / np.sqrt(var + eps)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        rm *= 1 - momentum
        rm += momentum * mean.astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * unbiased.astype(rv.dtype)
    else:
        mean = rm.astype(np.float64)
        inv_std = 1.0 / np.sqrt(rv.astype(np.float64) + eps)
        scale = g64 * inv_std
        shift = beta.data.astype(np.float64) - mean * scale
        k.affine(xd, scale.astype(dt), shift.astype(dt), relu, out)

    def backward(g):
        gx = np.empty_like(xd)
        if relu:
            np.multiply(g, out > 0, out=gx)
            g = gx
        else:
            g = np.ascontiguousarray(g, dtype=dt)
        ggamma = np.empty(C)
        gbeta = np.empty(C)
        kernels.impl().bn_backward(xd, g, out, mean, inv_std, g64, False, training, gx, ggamma, gbeta)
        return (gx if x.requires_grad else None), ggamma.astype(dt), gbeta.astype(dt)

    kind = "batch_norm_relu" if relu else "batch_norm"
    _emit(kind, out)
    return Tensor._from_op(out, kind, (x, gamma, beta), backward)


# losses ------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a 2-D array, computed in float64."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects N,K logits, got {logits.shape}")
    N, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {N} rows")
    if N == 0:
        raise DimensionError("softmax_cross_entropy: empty batch")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= K:
        raise LabelError(f"labels must be integers in [0, {K}), got {labels.tolist()}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(lse - z[rows, labels]))
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy is not finite")
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / N)).astype(logits.dtype),)

    return Tensor._from_op(out, "cross_entropy", (logits,), backward)
