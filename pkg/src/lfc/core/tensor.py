"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks that trace once, writes gradients
into the reachable trainable :class:`Parameter` objects and then releases the
trace, so a second call without a fresh forward pass is an error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import UsageError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable trace recording inside the block."""
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
    """A float64 array plus an optional link into the computation trace."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic, enough to assemble losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return mul(tsum(self), 1.0 / self.data.size)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf carrying its gradient buffer and Adam moments."""

    __slots__ = ("grad", "adam_m", "adam_v", "step_count", "name")

    def __init__(self, value, name: str = "", trainable: bool = True):
        super().__init__(np.array(value, dtype=DTYPE, copy=True), requires_grad=trainable)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording the trace only when some parent needs it."""
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(a.data.sum()), (a,), bw)


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Stack 0-d tensors into a 1-d tensor."""
    items = [as_tensor(t) for t in items]

    def bw(g):
        return tuple(g[i] for i in range(len(items)))

    return make_node(np.array([t.data for t in items], dtype=DTYPE).reshape(len(items)), items, bw)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable trainable Parameter."""
    if loss._consumed:
        raise UsageError("backward called twice on the same trace; run a new forward pass")
    if loss._backward is None:
        raise UsageError("backward called on a tensor with no recorded forward trace")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        if node._backward is None:
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
        node._parents = ()
        node._backward = None
    loss._consumed = True
