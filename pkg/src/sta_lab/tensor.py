"""Dense tensors with reverse-mode automatic differentiation.

Storage is a plain row-major numpy array (float32 for training, float64 for
gradient checks). Every differentiable op records its parents and a closure
mapping the output gradient to input gradients. Nodes get a monotonically
increasing id at creation, so the creation order is a valid topological order
and ``backward`` simply walks reachable nodes by descending id.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "mac_counter",
    "count_macs",
    "matmul",
    "softmax",
    "concat",
    "stack_sum",
    "where_const",
]

_ids = itertools.count()
_grad_enabled = True
_mac_counters: list[list[int]] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def mac_counter():
    """Count multiply-accumulates executed by matmul and convolution kernels.

    Yields a one-element list whose entry holds the running count.
    """
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.remove(box)


def count_macs(n: int) -> None:
    for box in _mac_counters:
        box[0] += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _const(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t.

        ``self`` must be a scalar unless an explicit seed gradient is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)

        pending: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=self.dtype)}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = pending.pop(nid, None)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.dtype:
                    pg = pg.astype(parent.dtype)
                prev = pending.get(parent._id)
                pending[parent._id] = pg if prev is None else prev + pg

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = self._const(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._const(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return self._const(other) - self

    def __mul__(self, other):
        other = self._const(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._const(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

        return Tensor._make(out, (a, b), bw)

    def __rtruediv__(self, other):
        return self._const(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary functions ------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def clamp_min(self, lo: float) -> "Tensor":
        x = self.data
        mask = x >= lo
        return Tensor._make(np.maximum(x, np.asarray(lo, dtype=x.dtype)), (self,), lambda g: (g * mask,))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor._make(out, (self,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            if _fancy(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._make(np.ascontiguousarray(self.data[idx]), (self,), bw)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes broadcast; gradients are dA = dC·Bᵀ and dB = Aᵀ·dC.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    count_macs(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (broadcastable boolean) restricts the support: masked-out entries
    are exactly zero and receive no gradient.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    """Sum a sequence of same-shape tensors left to right."""
    it = iter(tensors)
    total = next(it)
    for t in it:
        total = total + t
    return total


def where_const(cond: np.ndarray, x: Tensor, y: Tensor) -> Tensor:
    """Select ``x`` where ``cond`` holds and ``y`` elsewhere (cond is not differentiated)."""
    x, y = as_tensor(x), as_tensor(y)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0), x.shape), _unbroadcast(np.where(cond, 0, g), y.shape)

    return Tensor._make(np.where(cond, x.data, y.data), (x, y), bw)
