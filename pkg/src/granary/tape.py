"""Reverse-mode automatic differentiation over float64 numpy arrays.

A deliberately small op set tailored to a decoder-only transformer:
broadcastable arithmetic, matmul, reductions, embedding gathers, and a
fused numerically-stable logsumexp. Gradients are exact analytic
derivatives; the test suite cross-checks them against central finite
differences.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. ``_vjp`` maps the output
    gradient to a tuple of parent gradients (None for parents that need
    no gradient, e.g. integer indices held elsewhere).
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _ensure(other))

    def __radd__(self, other):
        return add(_ensure(other), self)

    def __sub__(self, other):
        return sub(self, _ensure(other))

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __mul__(self, other):
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return mul(_ensure(other), self)

    def __neg__(self):
        return mul(self, _ensure(-1.0))

    def __matmul__(self, other):
        return matmul(self, _ensure(other))


def _ensure(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out_data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor(out_data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out_data, (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def vjp(g):
        return (g * out_data,)

    return Tensor(out_data, (x,), vjp)


def log(x: Tensor) -> Tensor:
    def vjp(g):
        return (g / x.data,)

    return Tensor(np.log(x.data), (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out_data * out_data),)

    return Tensor(out_data, (x,), vjp)


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for a constant real exponent (positive base assumed)."""
    out_data = np.power(x.data, exponent)

    def vjp(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return Tensor(out_data, (x,), vjp)


def sumdim(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        g_expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_expanded, x.data.shape).copy(),)

    return Tensor(out_data, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis`` (keepdims). Backward is softmax."""
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = m + np.log(total)

    def vjp(g):
        return (g * (shifted / total),)

    return Tensor(out_data, (x,), vjp)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """out[..., :] = table[indices[...], :]; scatter-add on backward."""
    indices = np.asarray(indices)
    out_data = table.data[indices]

    def vjp(g):
        grad_table = np.zeros_like(table.data)
        np.add.at(grad_table, indices, g)
        return (grad_table,)

    return Tensor(out_data, (table,), vjp)


def take_along_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """out[b, t] = x[b, t, indices[b, t]] for a [B, T, V] tensor."""
    indices = np.asarray(indices)
    out_data = np.take_along_axis(x.data, indices[..., None], axis=-1)[..., 0]
    leading = np.ix_(*[np.arange(n) for n in indices.shape])

    def vjp(g):
        grad_x = np.zeros_like(x.data)
        np.add.at(grad_x, (*leading, indices), g)
        return (grad_x,)

    return Tensor(out_data, (x,), vjp)


def slice_rows(x: Tensor, n: int) -> Tensor:
    out_data = x.data[:n]

    def vjp(g):
        grad_x = np.zeros_like(x.data)
        grad_x[:n] = g
        return (grad_x,)

    return Tensor(out_data, (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def vjp(g):
        return (g.reshape(x.data.shape),)

    return Tensor(x.data.reshape(shape), (x,), vjp)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    def vjp(g):
        return (np.swapaxes(g, axis1, axis2),)

    return Tensor(np.swapaxes(x.data, axis1, axis2), (x,), vjp)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into every graph node."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")

    # Iterative post-order DFS; reversed order is a valid topological
    # order from the loss down to the leaves.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None:
                continue
            if parent.grad is None:
                parent.grad = grad
            else:
                parent.grad = parent.grad + grad
