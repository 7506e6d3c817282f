"""Dense tensor with a reverse-mode gradient tape.

A :class:`Tensor` wraps a contiguous numpy array. Operations in
:mod:`branchycsi.ops` record a :class:`Node` on their output when gradient
recording is enabled and at least one input requires a gradient; calling
:meth:`Tensor.backward` on a scalar walks those nodes in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """backward() was called on a tensor without a recorded tape."""


class LabelError(ValueError):
    """A class index is outside the valid range."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@dataclass
class OpProfile:
    """Executed-op log filled by ops while a :func:`profile` block is active."""

    ops: list = field(default_factory=list)

    def record(self, kind: str, macs: int = 0) -> None:
        self.ops.append((kind, int(macs)))

    @property
    def macs(self) -> int:
        return sum(m for _, m in self.ops)

    def count(self, kind: Optional[str] = None) -> int:
        if kind is None:
            return len(self.ops)
        return sum(1 for k, _ in self.ops if k == kind)


def active_profile() -> Optional[OpProfile]:
    return getattr(_state, "profile", None)


@contextlib.contextmanager
def profile():
    prev = active_profile()
    prof = OpProfile()
    _state.profile = prof
    try:
        yield prof
    finally:
        _state.profile = prev


class Node:
    """One recorded op: its inputs and a closure mapping output grad to input grads."""

    __slots__ = ("kind", "parents", "backward_fn")

    def __init__(self, kind: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.kind = kind
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


def _contiguous(a: np.ndarray) -> np.ndarray:
    """C-contiguous view or copy; unlike np.ascontiguousarray keeps 0-d arrays 0-d."""
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else DEFAULT_DTYPE
        self.data = _contiguous(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, kind: str, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _contiguous(np.asarray(data))
        out.grad = None
        out.name = ""
        out.requires_grad = False
        out._node = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._node = Node(kind, parents, backward_fn)
        return out

    @classmethod
    def zeros(cls, shape, dtype=None, requires_grad=False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)

    # array protocol -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; implementations live in ops -------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    # reverse mode ---------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        The recorded graph is released afterwards, so a second call raises
        :class:`TapeError`.
        """
        if self._node is None:
            raise TapeError("tensor has no recorded tape (detached, leaf, or already back-propagated)")
        if grad is None:
            if self.data.size != 1:
                raise TapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in order:
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if t.requires_grad and g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is None:
                t._node = None
                continue
            in_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            t._node = None


def _topological(root: Tensor) -> list:
    """Nodes ordered so that every tensor precedes the inputs it was computed from."""
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            post.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)
