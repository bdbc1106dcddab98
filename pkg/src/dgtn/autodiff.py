"""Reverse-mode differentiation over whole-matrix numpy operations.

A computation is a DAG of `Node` objects created by the functions in this
module. Leaves are parameters registered on a `Tape` or constants; calling
`Tape.backward(loss)` runs one reverse sweep and leaves a gradient of
matching shape on every registered parameter. A tape is single-owner:
one forward + one backward pass, no concurrent mutation.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import MissingParam, ShapeMismatch

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """One value in the recorded operation graph."""

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value + b.value, (a, b))
    out.vjp = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value - b.value, (a, b))
    out.vjp = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value * b.value, (a, b))
    out.vjp = lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    )
    return out


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value / b.value, (a, b))
    out.vjp = lambda g: (
        _unbroadcast(g / b.value, a.value.shape),
        _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
    )
    return out


def neg(a) -> Node:
    a = as_node(a)
    out = Node(-a.value, (a,))
    out.vjp = lambda g: (-g,)
    return out


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = Node(av @ bv, (a, b))
    if av.ndim == 2 and bv.ndim == 2:
        out.vjp = lambda g: (g @ bv.T, av.T @ g)
    elif av.ndim == 2 and bv.ndim == 1:
        out.vjp = lambda g: (np.outer(g, bv), av.T @ g)
    elif av.ndim == 1 and bv.ndim == 2:
        out.vjp = lambda g: (g @ bv.T, np.outer(av, g))
    elif av.ndim == 1 and bv.ndim == 1:
        out.vjp = lambda g: (g * bv, g * av)
    else:
        raise ShapeMismatch(f"matmul of ndim {av.ndim} and {bv.ndim} unsupported")
    return out


def transpose(a) -> Node:
    a = as_node(a)
    out = Node(a.value.T, (a,))
    out.vjp = lambda g: (g.T,)
    return out


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    out = Node(a.value.reshape(shape), (a,))
    out.vjp = lambda g: (g.reshape(old),)
    return out


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    av = a.value
    out = Node(av.sum(axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    out.vjp = vjp
    return out


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis: int) -> Node:
    """Max along one axis; ties route the gradient to the first maximizer."""
    a = as_node(a)
    av = a.value
    idx = av.argmax(axis=axis)
    out = Node(np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis), (a,))

    def vjp(g):
        gz = np.zeros_like(av)
        np.put_along_axis(gz, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gz,)

    out.vjp = vjp
    return out


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    values = [n.value for n in nodes]
    out = Node(np.concatenate(values, axis=axis), tuple(nodes))
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    out.vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def stack_scalars(nodes: Sequence) -> Node:
    """Stack 0-d nodes into a 1-d vector."""
    nodes = [as_node(n) for n in nodes]
    out = Node(np.array([float(n.value) for n in nodes]), tuple(nodes))
    out.vjp = lambda g: tuple(np.asarray(gi) for gi in g)
    return out


def rows(a, idx) -> Node:
    """Gather rows a[idx] for an integer index array."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Node(a.value[idx], (a,))

    def vjp(g):
        gz = np.zeros_like(a.value)
        np.add.at(gz, idx, g)
        return (gz,)

    out.vjp = vjp
    return out


def segment_sum(a, seg, n_segments: int) -> Node:
    """Sum rows of `a` into `n_segments` buckets given by `seg`."""
    a = as_node(a)
    seg = np.asarray(seg, dtype=np.intp)
    shape = (n_segments,) + a.value.shape[1:]
    acc = np.zeros(shape, dtype=np.float64)
    np.add.at(acc, seg, a.value)
    out = Node(acc, (a,))
    out.vjp = lambda g: (g[seg],)
    return out


def exp(a) -> Node:
    a = as_node(a)
    ev = np.exp(a.value)
    out = Node(ev, (a,))
    out.vjp = lambda g: (g * ev,)
    return out


def log(a) -> Node:
    a = as_node(a)
    out = Node(np.log(a.value), (a,))
    out.vjp = lambda g: (g / a.value,)
    return out


def sqrt(a) -> Node:
    a = as_node(a)
    rv = np.sqrt(a.value)
    out = Node(rv, (a,))
    out.vjp = lambda g: (g * 0.5 / rv,)
    return out


def square(a) -> Node:
    a = as_node(a)
    out = Node(a.value * a.value, (a,))
    out.vjp = lambda g: (2.0 * g * a.value,)
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    v = a.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Node(s, (a,))
    out.vjp = lambda g: (g * s * (1.0 - s),)
    return out


def gelu(a) -> Node:
    a = as_node(a)
    v = a.value
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    out = Node(v * cdf, (a,))
    out.vjp = lambda g: (g * (cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)),)
    return out


def softmax_rows(a) -> Node:
    """Row-wise softmax of a 2-d node, max-subtracted for stability."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Node(s, (a,))
    out.vjp = lambda g: ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)
    return out


def dropout(a, rate: float, rng: np.random.Generator) -> Node:
    """Inverted dropout; the mask is a constant w.r.t. differentiation."""
    a = as_node(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(keep))


def value(a) -> np.ndarray:
    return a.value if isinstance(a, Node) else np.asarray(a, dtype=np.float64)


class Tape:
    """Parameter registry plus one reverse sweep over the recorded graph."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def param(self, name: str, val: np.ndarray) -> Node:
        if name in self._params:
            return self._params[name]
        node = Node(np.asarray(val, dtype=np.float64))
        self._params[name] = node
        return node

    def param_node(self, name: str) -> Node:
        try:
            return self._params[name]
        except KeyError:
            raise MissingParam(name) from None

    @property
    def param_names(self) -> Iterable[str]:
        return self._params.keys()

    def backward(self, root: Node) -> None:
        if root.value.size != 1:
            raise ShapeMismatch("backward root must be a scalar")
        order = _toposort(root)
        root.grad = np.ones_like(root.value)
        for node in reversed(order):
            if node.grad is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(node.grad)):
                if pg is None:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient per registered parameter; zeros where nothing flowed."""
        out = {}
        for name, node in self._params.items():
            g = node.grad if node.grad is not None else np.zeros_like(node.value)
            if g.shape != node.value.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != param shape {node.value.shape} for {name}")
            out[name] = g
        return out


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order
