"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a numpy array.  Ops that see at least one input with
``requires_grad`` record a closure mapping the output gradient to input
gradients; :func:`backward` replays those closures in reverse topological
order and accumulates into leaf ``.grad`` slots.
"""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NumericsError, ShapeError, StateError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
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
    __slots__ = ("data", "grad", "requires_grad", "decay", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, decay: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.decay = decay
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the ops live in functional
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    # a finite sum implies finite entries; only a non-finite sum needs the full scan
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NumericsError(op)
    return arr


def make_result(op: str, data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op output, recording the tape entry when any parent needs grad."""
    check_finite(op, data)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves reached only through :func:`stop_gradient` still receive a gradient
    slot, filled with exact zeros.  The tape is released afterwards, so a
    second call on the same loss raises :class:`StateError`.
    """
    if loss._backward is None:
        raise StateError("backward() called on a tensor with no recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        if g is None:
            g = np.zeros_like(node.data)
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if pg is None:
                pg = np.zeros_like(p.data)
            check_finite(f"{node.op}.backward", pg)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None


# --- elementwise / structural ops -------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result("mul", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result("matmul", out, (a, b), bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return make_result("reshape", out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, bw)


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Pick one slice along ``axis`` (drops that axis)."""
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_result("select", out, (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; zero gradient backward.

    Unlike detaching, the input stays on the tape and receives an explicit
    all-zero gradient, so callers can check that the stop held.
    """
    out = a.data.copy()

    def bw(g):
        return (np.zeros_like(a.data),)

    return make_result("stop_gradient", out, (a,), bw)
