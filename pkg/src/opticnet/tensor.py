"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` orders that graph into a :class:`Tape` and replays it in
reverse.  Layout is channels-last ``(n, h, w, c)``; dense and loss outputs are
allowed to drop to lower rank.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for an op."""


class ContractError(ValueError):
    """A precondition of an op was violated."""


class EmptyTapeError(RuntimeError):
    """backward() was called on a value that no recorded op produced."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.size == 0:
            raise ContractError(f"tensor dims must all be >= 1, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def __add__(self, other):
        from opticnet import ops
        return ops.add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        from opticnet import ops
        return ops.mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __sub__(self, other):
        from opticnet import ops
        return ops.sub(self, _wrap(other, self))

    def __neg__(self):
        from opticnet import ops
        return ops.scale(self, -1.0)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape).copy())


class Variable(Tensor):
    """A trainable leaf: model weights, BN scale/shift."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.trainable = trainable

    def __repr__(self):
        return f"Variable(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, grad: np.ndarray | None = None) -> Tape:
    """Accumulate d(loss)/dW into ``.grad`` of every leaf that requires grad.

    ``grad`` seeds the upstream gradient; it is only legal to omit it for a
    single-element loss.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    elif grad.shape != loss.shape:
        raise DimensionError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")
    if loss._backward is None:
        raise EmptyTapeError("loss was not produced by any recorded op (empty tape)")

    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


def zero_grad(variables: Iterable[Tensor]) -> None:
    for v in variables:
        if v.grad is None:
            v.grad = np.zeros_like(v.data)
        else:
            v.grad.fill(0.0)
