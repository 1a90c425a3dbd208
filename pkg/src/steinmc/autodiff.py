"""Minimal reverse-mode differentiation tape over scalars and small vectors.

Nodes hold a numpy value (0-d or 1-d) and closures that push adjoints to
their parents.  The graph is built eagerly by the arithmetic helpers below;
calling :func:`backward` on a scalar output accumulates gradients into the
``grad`` attribute of every ``requires_grad`` leaf.

Broadcasting is limited to scalar-vector pairs, which is all the embedded
sampler refinements need.  Noise drawn inside a differentiated update is
recorded as a constant, so step-size gradients flow only through the explicit
step-size factors.
"""

from __future__ import annotations

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "parents", "grad", "requires_grad", "_backward_done")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        if self.value.ndim > 1:
            raise ValueError("tape values must be scalars or 1-d vectors")
        self.parents = parents  # tuple of (node, pull) pairs
        self.grad = None
        self.requires_grad = requires_grad
        self._backward_done = False

    # arithmetic sugar; every route lands on the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __repr__(self):
        return f"Node(value={self.value!r}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(value, requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{op}: non-finite result")


def _reduce_to(adjoint, shape):
    # undo scalar -> vector broadcasting during the reverse pass
    if shape == () and np.ndim(adjoint) > 0:
        return np.sum(adjoint)
    return adjoint


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(
        a.value + b.value,
        parents=(
            (a, lambda g: _reduce_to(g, a.value.shape)),
            (b, lambda g: _reduce_to(g, b.value.shape)),
        ),
    )
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(
        a.value * b.value,
        parents=(
            (a, lambda g: _reduce_to(g * b.value, a.value.shape)),
            (b, lambda g: _reduce_to(g * a.value, b.value.shape)),
        ),
    )
    return out


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, parents=((a, lambda g: -g),))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if np.any(b.value == 0):
        raise ValueError("div: division by zero")
    out_val = a.value / b.value
    out = Node(
        out_val,
        parents=(
            (a, lambda g: _reduce_to(g / b.value, a.value.shape)),
            (b, lambda g: _reduce_to(-g * a.value / (b.value * b.value), b.value.shape)),
        ),
    )
    return out


def exp(a) -> Node:
    a = as_node(a)
    val = np.exp(a.value)
    _check_finite(val, "exp")
    return Node(val, parents=((a, lambda g: g * val),))


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("log: operand must be positive")
    return Node(np.log(a.value), parents=((a, lambda g: g / a.value),))


def tanh(a) -> Node:
    a = as_node(a)
    val = np.tanh(a.value)
    return Node(val, parents=((a, lambda g: g * (1.0 - val * val)),))


def relu(a) -> Node:
    """max(0, x); the subgradient at 0 is taken as 0."""
    a = as_node(a)
    mask = (a.value > 0).astype(float)
    return Node(a.value * mask, parents=((a, lambda g: g * mask),))


def reduce_sum(a) -> Node:
    a = as_node(a)
    shape = a.value.shape
    return Node(np.sum(a.value), parents=((a, lambda g: g * np.ones(shape)),))


def dot(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ValueError("dot expects two vectors")
    return Node(
        np.dot(a.value, b.value),
        parents=((a, lambda g: g * b.value), (b, lambda g: g * a.value)),
    )


def gaussian_log_pdf(x, mean, std) -> Node:
    """Elementwise log N(x; mean, std^2); callers reduce_sum as needed."""
    x, mean, std = as_node(x), as_node(mean), as_node(std)
    if np.any(std.value <= 0):
        raise ValueError("gaussian_log_pdf: std must be positive")
    z = (x.value - mean.value) / std.value
    val = -0.5 * z * z - np.log(std.value) - 0.5 * _LOG_2PI

    def pull_x(g):
        return _reduce_to(-g * z / std.value, x.value.shape)

    def pull_mean(g):
        return _reduce_to(g * z / std.value, mean.value.shape)

    def pull_std(g):
        return _reduce_to(g * (z * z - 1.0) / std.value, std.value.shape)

    return Node(val, parents=((x, pull_x), (mean, pull_mean), (std, pull_std)))


def stop_gradient(a) -> Node:
    """Identity in the forward pass; the reverse pass sees a constant."""
    a = as_node(a)
    return Node(a.value.copy())


def backward(output: Node) -> None:
    """Reverse-mode sweep from a scalar output.

    Gradients accumulate into ``grad`` on every node reachable from
    ``output``; a second sweep from the same node without rebuilding the
    graph is rejected.
    """
    if output.value.shape != ():
        raise ValueError("backward expects a scalar output")
    if output._backward_done:
        raise RuntimeError("backward already ran on this tape; rebuild the graph")
    output._backward_done = True

    order = _topological_order(output)
    for node in order:
        node.grad = np.zeros(node.value.shape)
    output.grad = np.ones(())

    for node in reversed(order):
        g = node.grad
        for parent, pull in node.parents:
            parent.grad = parent.grad + pull(g)


def _topological_order(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order
