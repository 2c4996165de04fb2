"""Reverse-mode autodiff over float64 numpy arrays.

A minimal tape: just enough primitives for MLP forward passes, calibrated
probability pipelines and the team-utility surrogate losses. Every node
carries a value and a vector-Jacobian closure; `backward` walks the graph
once in reverse topological order. Not a general-purpose autograd.
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("data", "grad", "parents", "vjp", "needs_grad")

    def __init__(self, data, parents=(), vjp=None, needs_grad=False):
        self.data = data
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, wrap(other))

    def __radd__(self, other):
        return add(wrap(other), self)

    def __sub__(self, other):
        return sub(self, wrap(other))

    def __rsub__(self, other):
        return sub(wrap(other), self)

    def __mul__(self, other):
        return mul(self, wrap(other))

    def __rmul__(self, other):
        return mul(wrap(other), self)

    def __truediv__(self, other):
        return div(self, wrap(other))

    def __neg__(self):
        return mul(self, constant(np.float64(-1.0)))


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def param(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64), needs_grad=True)


def wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum gradient back down to the broadcast source's shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a: Node, b: Node, data, vjp) -> Node:
    ng = a.needs_grad or b.needs_grad
    return Node(data, (a, b), vjp if ng else None, ng)


def _unary(a: Node, data, vjp) -> Node:
    return Node(data, (a,), vjp if a.needs_grad else None, a.needs_grad)


def add(a: Node, b: Node) -> Node:
    return _binary(a, b, a.data + b.data,
                   lambda g: (_unbroadcast(g, a.data.shape),
                              _unbroadcast(g, b.data.shape)))


def sub(a: Node, b: Node) -> Node:
    return _binary(a, b, a.data - b.data,
                   lambda g: (_unbroadcast(g, a.data.shape),
                              _unbroadcast(-g, b.data.shape)))


def mul(a: Node, b: Node) -> Node:
    return _binary(a, b, a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


def div(a: Node, b: Node) -> Node:
    out = a.data / b.data
    return _binary(a, b, out,
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * out / b.data, b.data.shape)))


def matmul(a: Node, b: Node) -> Node:
    return _binary(a, b, a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a: Node) -> Node:
    mask = a.data > 0.0
    return _unary(a, a.data * mask, lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    # Stable in both tails.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _unary(a, out, lambda g: (g * out * (1.0 - out),))


def exp(a: Node) -> Node:
    out = np.exp(a.data)
    return _unary(a, out, lambda g: (g * out,))


def log(a: Node) -> Node:
    return _unary(a, np.log(a.data), lambda g: (g / a.data,))


def clamp_min(a: Node, lo: float) -> Node:
    # Gradient passes only where the clamp is inactive.
    mask = a.data > lo
    return _unary(a, np.maximum(a.data, lo), lambda g: (g * mask,))


def softmax(a: Node, axis: int = -1, tau: float = 1.0) -> Node:
    z = a.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / tau,)

    return _unary(a, out, vjp)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _unary(a, out, vjp)


def reshape(a: Node, shape) -> Node:
    orig = a.data.shape
    return _unary(a, a.data.reshape(shape), lambda g: (g.reshape(orig),))


def backward(root: Node) -> None:
    """Accumulate gradients of `root` (summed if non-scalar) into the graph."""
    topo: list[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.needs_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if parent.needs_grad:
                parent.grad = g if parent.grad is None else parent.grad + g
