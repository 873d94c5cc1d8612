"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough for the actor-critic losses: broadcast-aware elementwise ops,
matmul, tanh/exp/log, reductions, clip, and elementwise min. Tensors
record their parents and a vector-Jacobian product per parent; backward()
walks the graph once in reverse topological order.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1
                 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Graph node: float64 array, parents, and per-parent vjp closures."""

    __slots__ = ("data", "grad", "parents", "requires_grad")

    def __init__(self, data, parents=(), requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        # parents: tuple of (Tensor, vjp) with vjp(out_grad) -> parent grad
        self.parents = parents
        self.requires_grad = requires_grad or any(
            p.requires_grad for p, _ in parents)

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction -------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return Tensor(self.data + other.data, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape))))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        return Tensor(self.data * other.data, (
            (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.data.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return Tensor(self.data / other.data, (
            (self, lambda g: _unbroadcast(g / other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(-g * self.data / other.data ** 2,
                                           other.data.shape))))

    def __matmul__(self, other):
        other = as_tensor(other)
        return Tensor(self.data @ other.data, (
            (self, lambda g: g @ other.data.T),
            (other, lambda g: self.data.T @ g)))

    def sum(self, axis=None):
        data = self.data.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis),
                                   self.data.shape).copy()
        return Tensor(data, ((self, vjp),))

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node.grad
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg.copy() if isinstance(pg, np.ndarray) \
                        else np.asarray(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor(y, ((x, lambda g: g * (1.0 - y * y)),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor(y, ((x, lambda g: g * y),))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), ((x, lambda g: g / x.data),))


def square(x: Tensor) -> Tensor:
    return Tensor(x.data ** 2, ((x, lambda g: g * 2.0 * x.data),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data
    return Tensor(np.where(mask, a.data, b.data), (
        (a, lambda g: _unbroadcast(g * mask, a.data.shape)),
        (b, lambda g: _unbroadcast(g * ~mask, b.data.shape))))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor(np.clip(x.data, lo, hi),
                  ((x, lambda g: g * inside),))
