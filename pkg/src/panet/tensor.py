"""Dense tensors with tape-free reverse-mode autodiff.

Every op builds a node that remembers its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``Tensor.backward`` walks the
graph in reverse topological order.  Data is held in float64 numpy arrays.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class ConfigurationError(ValueError):
    """An operation was configured with unsupported settings."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap ``data`` as the result of an op.

        ``backward(g)`` must return one gradient (or None) per parent.
        """
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
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return total_sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(a.data[idx], (a,), backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather ``a[rows]`` along the first axis; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return Tensor.from_op(a.data[rows], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor.from_op(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),)
    )


def total_sum(a: Tensor) -> Tensor:
    return Tensor.from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor.from_op(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),)
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


FUSION_MODES = ("max", "sum", "product")


def elementwise_fuse(inputs: Sequence[Tensor], mode: str) -> Tensor:
    """Reduce same-shaped tensors elementwise with ``max``, ``sum`` or ``product``.

    Under ``max`` the gradient goes to the winning input only; ties go to the
    lowest input index.
    """
    if not inputs:
        raise ContractViolation("elementwise_fuse needs at least one input")
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise ContractViolation(f"elementwise_fuse shape mismatch: {[t.shape for t in inputs]}")
    if mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion mode {mode!r}")
    stacked = np.stack([t.data for t in inputs])
    if mode == "sum":
        out = stacked.sum(axis=0)
        return Tensor.from_op(out, inputs, lambda g: tuple(g for _ in inputs))
    if mode == "max":
        winner = stacked.argmax(axis=0)  # first occurrence == lowest index
        out = np.take_along_axis(stacked, winner[None], axis=0)[0]
        return Tensor.from_op(
            out, inputs, lambda g: tuple(np.where(winner == i, g, 0.0) for i in range(len(inputs)))
        )

    out = stacked.prod(axis=0)

    def backward(g):
        grads = []
        for i in range(len(inputs)):
            others = np.ones_like(out)
            for j in range(len(inputs)):
                if j != i:
                    others = others * stacked[j]
            grads.append(g * others)
        return tuple(grads)

    return Tensor.from_op(out, inputs, backward)
