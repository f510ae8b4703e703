"""Reverse-mode automatic differentiation over a flat tape of dense arrays.

The tape is deliberately small: just enough primitives to express the
closed-loop simulations in :mod:`cocp.envs` (linear dynamics, trigonometric
path-tracking terms, portfolio return normalization, piecewise-linear
utilities, quadratic stage costs) and to host the QP argmin operation that
:mod:`cocp.qp_diff` registers as a custom node.

Values are dense float64 numpy arrays; scalars are size-1 arrays (shape
``()`` or ``(1,)``). A :class:`Graph` records :class:`Node` objects in
topological order, and :meth:`Graph.backward` runs the reverse sweep from a
scalar root. Gradient accumulation order is fixed by node id, so identical
graphs produce bit-identical gradients.

Broadcasting is restricted to scalar-times-tensor; everything else must be
shape-conformable. Subgradient conventions at kinks: ``abs'(0) = 0``,
``min2`` ties follow the first argument, and the negative-part derivative at
0 is 0.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "TapeError",
    "ShapeError",
    "NumericError",
    "as_tensor",
    "register_backward",
    "accumulate",
]


class TapeError(Exception):
    """Base class for tape construction and execution failures."""


class ShapeError(TapeError):
    pass


class NumericError(TapeError):
    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


def as_tensor(value) -> np.ndarray:
    """Coerce to a float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError("tensor contains non-finite entries")
    return arr


class Node:
    """One recorded value: an array plus its position in the graph."""

    __slots__ = ("graph", "id", "op", "parents", "value", "ctx", "grad")

    def __init__(self, graph, node_id, op, parents, value, ctx):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    # Sugar used by the environment builders; scalars multiply via `scale`.
    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __neg__(self):
        return self.graph.neg(self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(float(other), self)

    def __rmul__(self, other):
        return self.graph.scale(float(other), self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return self.graph.div(self, other)
        return self.graph.scale(1.0 / float(other), self)


def accumulate(parent: Node, contribution: np.ndarray) -> None:
    """Add a backward contribution into a parent's gradient buffer."""
    g = parent.grad
    parent.grad = contribution if g is None else g + contribution


_acc = accumulate


def _bw_add(node, g):
    a, b = node.parents
    _acc(a, g)
    _acc(b, g)


def _bw_sub(node, g):
    a, b = node.parents
    _acc(a, g)
    _acc(b, -g)


def _bw_neg(node, g):
    _acc(node.parents[0], -g)


def _bw_scale(node, g):
    _acc(node.parents[0], node.ctx * g)


def _bw_mul(node, g):
    a, b = node.parents
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        _acc(a, g * bv)
        _acc(b, g * av)
    elif av.size == 1:
        _acc(a, np.asarray((g * bv).sum()).reshape(av.shape))
        _acc(b, g * av.reshape(()))
    else:
        _acc(a, g * bv.reshape(()))
        _acc(b, np.asarray((g * av).sum()).reshape(bv.shape))


def _bw_div(node, g):
    a, b = node.parents
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        _acc(a, g / bv)
        _acc(b, -g * av / (bv * bv))
    else:  # scalar denominator
        bs = bv.reshape(())
        _acc(a, g / bs)
        _acc(b, np.asarray(-(g * av).sum() / (bs * bs)).reshape(bv.shape))


def _bw_dot(node, g):
    a, b = node.parents
    _acc(a, g * b.value)
    _acc(b, g * a.value)


def _bw_matvec(node, g):
    m, v = node.parents
    _acc(m, np.outer(g, v.value))
    _acc(v, m.value.T @ g)


def _bw_matmul(node, g):
    a, b = node.parents
    _acc(a, g @ b.value.T)
    _acc(b, a.value.T @ g)


def _bw_transpose(node, g):
    _acc(node.parents[0], g.T)


def _bw_sum(node, g):
    a = node.parents[0]
    _acc(a, np.full(a.value.shape, float(g)))


def _bw_square(node, g):
    a = node.parents[0]
    _acc(a, 2.0 * a.value * g)


def _bw_abs(node, g):
    a = node.parents[0]
    _acc(a, np.sign(a.value) * g)


def _bw_sqrt(node, g):
    _acc(node.parents[0], 0.5 * g / node.value)


def _bw_sin(node, g):
    a = node.parents[0]
    _acc(a, np.cos(a.value) * g)


def _bw_cos(node, g):
    a = node.parents[0]
    _acc(a, -np.sin(a.value) * g)


def _bw_min2(node, g):
    a, b = node.parents
    take_a = a.value <= b.value
    _acc(a, g * take_a)
    _acc(b, g * ~take_a)


def _bw_negpart(node, g):
    a = node.parents[0]
    _acc(a, -g * (a.value < 0.0))


def _bw_concat(node, g):
    offsets = node.ctx
    for parent, start, stop in zip(node.parents, offsets[:-1], offsets[1:]):
        _acc(parent, g[start:stop])


def _bw_slice(node, g):
    a = node.parents[0]
    start, stop = node.ctx
    buf = np.zeros(a.value.shape)
    buf[start:stop] = g
    _acc(a, buf)


def _bw_reshape(node, g):
    a = node.parents[0]
    _acc(a, g.reshape(a.value.shape))


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "neg": _bw_neg,
    "scale": _bw_scale,
    "mul": _bw_mul,
    "div": _bw_div,
    "dot": _bw_dot,
    "matvec": _bw_matvec,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "sum": _bw_sum,
    "square": _bw_square,
    "abs": _bw_abs,
    "sqrt": _bw_sqrt,
    "sin": _bw_sin,
    "cos": _bw_cos,
    "min2": _bw_min2,
    "negpart": _bw_negpart,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "reshape": _bw_reshape,
}

_LEAF_OPS = frozenset({"const", "param"})


def register_backward(op: str, rule: Callable) -> None:
    """Register the backward rule for a custom op (used by the QP node)."""
    BACKWARD_RULES[op] = rule


class Graph:
    """Append-only computation tape. Single writer; values immutable."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._const_cache: dict[int, tuple[np.ndarray, Node]] = {}

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, parents, value, ctx=None) -> Node:
        """Append one node. Parents must already belong to this graph."""
        if parents and op not in BACKWARD_RULES:
            raise TapeError(f"unknown op {op!r}")
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        # cheap finiteness probe: a finite sum certifies finite entries except
        # when large finite values overflow, so only then scan elementwise
        if not math.isfinite(float(value.sum())):
            if not np.isfinite(value).all():
                raise NumericError(
                    f"non-finite value produced by op {op!r}",
                    node_id=len(self.nodes),
                )
        for parent in parents:
            if parent.graph is not self:
                raise TapeError("parent node belongs to a different graph")
        node = Node(self, len(self.nodes), op, tuple(parents), value, ctx)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def constant(self, value) -> Node:
        """Leaf with zero gradient. Identical array objects are memoized
        per graph, so environments can reuse their data matrices cheaply."""
        if isinstance(value, np.ndarray):
            hit = self._const_cache.get(id(value))
            if hit is not None and hit[0] is value:
                return hit[1]
            node = self.record("const", (), value)
            self._const_cache[id(value)] = (value, node)
            return node
        return self.record("const", (), value)

    def param(self, value) -> Node:
        """Leaf whose gradient is collected by the tuner."""
        return self.record("param", (), value)

    # -- primitives ----------------------------------------------------------

    def _conformable(self, op, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeError(
                f"{op}: shapes {a.value.shape} and {b.value.shape} differ"
            )

    def add(self, a: Node, b: Node) -> Node:
        self._conformable("add", a, b)
        return self.record("add", (a, b), a.value + b.value)

    def sub(self, a: Node, b: Node) -> Node:
        self._conformable("sub", a, b)
        return self.record("sub", (a, b), a.value - b.value)

    def neg(self, a: Node) -> Node:
        return self.record("neg", (a,), -a.value)

    def scale(self, alpha: float, a: Node) -> Node:
        return self.record("scale", (a,), alpha * a.value, ctx=float(alpha))

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product; one side may be a size-1 scalar."""
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            value = av * bv
        elif av.size == 1:
            value = av.reshape(()) * bv
        elif bv.size == 1:
            value = av * bv.reshape(())
        else:
            raise ShapeError(f"mul: shapes {av.shape} and {bv.shape}")
        return self.record("mul", (a, b), value)

    def div(self, a: Node, b: Node) -> Node:
        """Elementwise quotient; the denominator may be a size-1 scalar."""
        av, bv = a.value, b.value
        if (bv == 0.0).any():
            raise NumericError(
                f"div: zero denominator (node {b.id})", node_id=b.id
            )
        if av.shape == bv.shape:
            value = av / bv
        elif bv.size == 1:
            value = av / bv.reshape(())
        else:
            raise ShapeError(f"div: shapes {av.shape} and {bv.shape}")
        return self.record("div", (a, b), value)

    def dot(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 1 or b.value.ndim != 1:
            raise ShapeError("dot expects vectors")
        self._conformable("dot", a, b)
        return self.record("dot", (a, b), np.asarray(a.value @ b.value))

    def matvec(self, m: Node, v: Node) -> Node:
        if m.value.ndim != 2 or v.value.ndim != 1:
            raise ShapeError("matvec expects a matrix and a vector")
        if m.value.shape[1] != v.value.shape[0]:
            raise ShapeError(
                f"matvec: {m.value.shape} incompatible with {v.value.shape}"
            )
        return self.record("matvec", (m, v), m.value @ v.value)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise ShapeError("matmul expects matrices")
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(
                f"matmul: {a.value.shape} incompatible with {b.value.shape}"
            )
        return self.record("matmul", (a, b), a.value @ b.value)

    def transpose(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ShapeError("transpose expects a matrix")
        return self.record("transpose", (a,), a.value.T.copy())

    def sum(self, a: Node) -> Node:
        return self.record("sum", (a,), np.asarray(a.value.sum()))

    def square(self, a: Node) -> Node:
        return self.record("square", (a,), a.value * a.value)

    def abs(self, a: Node) -> Node:
        return self.record("abs", (a,), np.abs(a.value))

    def sqrt(self, a: Node) -> Node:
        return self.record("sqrt", (a,), np.sqrt(a.value))

    def sin(self, a: Node) -> Node:
        return self.record("sin", (a,), np.sin(a.value))

    def cos(self, a: Node) -> Node:
        return self.record("cos", (a,), np.cos(a.value))

    def min2(self, a: Node, b: Node) -> Node:
        """Elementwise binary minimum; ties differentiate through ``a``."""
        self._conformable("min2", a, b)
        return self.record("min2", (a, b), np.minimum(a.value, b.value))

    def negpart(self, a: Node) -> Node:
        """Negative part ``max(-x, 0)``, applied elementwise."""
        return self.record("negpart", (a,), np.maximum(-a.value, 0.0))

    def concat(self, parts) -> Node:
        parts = tuple(parts)
        for p in parts:
            if p.value.ndim != 1:
                raise ShapeError("concat expects 1-d parts")
        offsets = [0]
        for p in parts:
            offsets.append(offsets[-1] + p.value.shape[0])
        value = np.concatenate([p.value for p in parts])
        return self.record("concat", parts, value, ctx=tuple(offsets))

    def slice(self, a: Node, start: int, stop: int) -> Node:
        if a.value.ndim != 1:
            raise ShapeError("slice expects a vector")
        if not (0 <= start < stop <= a.value.shape[0]):
            raise ShapeError(
                f"slice [{start}:{stop}] out of range for length {a.value.shape[0]}"
            )
        return self.record(
            "slice", (a,), a.value[start:stop].copy(), ctx=(start, stop)
        )

    def reshape(self, a: Node, shape) -> Node:
        shape = tuple(shape)
        value = a.value.reshape(shape).copy()
        return self.record("reshape", (a,), value, ctx=a.value.shape)

    # -- reverse sweep -------------------------------------------------------

    def backward(self, root: Node) -> None:
        """Populate gradient buffers for everything reachable from ``root``.

        The root must be scalar (size 1). Nodes not reachable from the root
        are left with a zero gradient (reported by :meth:`grad`).
        """
        if root.graph is not self:
            raise TapeError("root belongs to a different graph")
        if root.value.size != 1:
            raise TapeError("backward root must be scalar")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        rules = BACKWARD_RULES
        for node in reversed(self.nodes):
            if node.grad is None or not node.parents:
                continue
            rules[node.op](node, node.grad)

    def grad(self, node: Node) -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``node`` (zeros if unreachable)."""
        return node.grad if node.grad is not None else np.zeros_like(node.value)
