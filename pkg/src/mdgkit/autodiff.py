"""Reverse-mode differentiation over dense float64 tensors.

The engine is an eager expression graph: every op computes its value at
construction and records enough structure for the reverse pass. Backward
rules emit ordinary graph nodes, so differentiating a gradient (for exact
Hessian-vector products) is just a second reverse pass over the enlarged
graph.

The op set is closed: matmul, transpose, add, bias add, elementwise
multiply, scalar multiply, relu, tanh, exp, row-wise log-softmax,
gather/scatter by row index, full/axis sums, row/column broadcasts and
constant fill. Everything else (means, losses, dot products) is composed
from these. All values are C-contiguous float64; any non-finite result
raises :class:`NumericFault` naming the op that produced it.

Each graph is confined to the thread that builds it; distinct graphs over
shared read-only arrays are safe to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._kernels import active as K


class NumericFault(ArithmeticError):
    """A forward or reverse computation produced NaN or Inf."""


class Node:
    """One value in an expression graph."""

    __slots__ = ("op", "inputs", "value", "meta")

    def __init__(self, op, inputs, value, meta=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.meta = meta

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


def _make(op, inputs, value, meta=None):
    if not K.check_finite(value):
        raise NumericFault(f"non-finite value produced by op '{op}'")
    return Node(op, inputs, value, meta)


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


def leaf(array) -> Node:
    """Differentiable input (a parameter tensor)."""
    a = _as_array(array)
    if not K.check_finite(a):
        raise NumericFault("non-finite value in leaf tensor")
    return Node("leaf", (), a)


def constant(array) -> Node:
    """Non-differentiable input (data, labels as floats, fixed weights)."""
    a = _as_array(array)
    if not K.check_finite(a):
        raise NumericFault("non-finite value in constant tensor")
    return Node("const", (), a)


# ---------------------------------------------------------------------------
# Op constructors
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make("matmul", (a, b), K.matmul(a.value, b.value))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _make("transpose", (a,), K.transpose(a.value))


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _make("add", (a, b), K.add(a.value, b.value))


def sub(a: Node, b: Node) -> Node:
    return add(a, scale(b, -1.0))


def add_bias(x: Node, b: Node) -> Node:
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    return _make("add_bias", (x, b), K.add_bias(x.value, b.value))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _make("mul", (a, b), K.mul(a.value, b.value))


def scale(x: Node, c: float) -> Node:
    return _make("scale", (x,), K.scale(x.value, float(c)), meta=float(c))


def relu(x: Node) -> Node:
    return _make("relu", (x,), K.relu(x.value))


def mask_pos(ref: Node, t: Node) -> Node:
    """t gated by the positivity mask of ref; no gradient flows into ref."""
    if ref.shape != t.shape:
        raise ValueError(f"mask_pos shape mismatch: {ref.shape} vs {t.shape}")
    return _make("mask_pos", (ref, t), K.mask_pos(ref.value, t.value))


def tanh(x: Node) -> Node:
    return _make("tanh", (x,), K.tanh(x.value))


def exp(x: Node) -> Node:
    return _make("exp", (x,), K.exp(x.value))


def log_softmax(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ValueError("log_softmax expects a matrix of logits")
    return _make("log_softmax", (x,), K.log_softmax(x.value))


def gather_rows(x: Node, idx) -> Node:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if x.value.ndim != 2 or idx.shape != (x.shape[0],):
        raise ValueError("gather_rows expects a matrix and one index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ValueError("gather_rows index out of range")
    return _make("gather_rows", (x,), K.gather_rows(x.value, idx), meta=(idx, x.shape[1]))


def scatter_rows(v: Node, idx, ncols: int) -> Node:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if v.value.ndim != 1 or idx.shape != v.shape:
        raise ValueError("scatter_rows expects a vector and one index per entry")
    return _make("scatter_rows", (v,), K.scatter_rows(v.value, idx, ncols), meta=(idx, ncols))


def sum_all(x: Node) -> Node:
    return _make("sum_all", (x,), K.sum_all(x.value), meta=x.shape)


def mean_all(x: Node) -> Node:
    if x.value.size == 0:
        raise ValueError("mean of an empty tensor is undefined")
    return scale(sum_all(x), 1.0 / x.value.size)


def sum_axis0(x: Node) -> Node:
    return _make("sum_axis0", (x,), K.sum_axis0(x.value), meta=x.shape[0])


def sum_axis1_keep(x: Node) -> Node:
    return _make("sum_axis1_keep", (x,), K.sum_axis1_keep(x.value), meta=x.shape[1])


def broadcast_cols(c: Node, m: int) -> Node:
    if c.value.ndim != 2 or c.shape[1] != 1:
        raise ValueError("broadcast_cols expects an (n, 1) column")
    return _make("broadcast_cols", (c,), K.broadcast_cols(c.value, m), meta=m)


def broadcast_rows(r: Node, n: int) -> Node:
    if r.value.ndim != 1:
        raise ValueError("broadcast_rows expects a vector")
    return _make("broadcast_rows", (r,), K.broadcast_rows(r.value, n), meta=n)


def fill(shape, s: Node) -> Node:
    if s.value.shape != ():
        raise ValueError("fill expects a scalar node")
    return _make("fill", (s,), K.fill(tuple(shape), float(s.value)), meta=tuple(shape))


def dot_all(a: Node, b: Node) -> Node:
    """Sum of the elementwise product, as a scalar node."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# Backward rules: node, adjoint -> adjoint contribution per input (None = no flow)
# ---------------------------------------------------------------------------


def _bw_tanh(node, adj):
    ones = constant(np.ones(node.shape))
    return (mul(adj, sub(ones, mul(node, node))),)


def _bw_log_softmax(node, adj):
    probs = exp(node)
    rowsums = broadcast_cols(sum_axis1_keep(adj), node.shape[1])
    return (sub(adj, mul(probs, rowsums)),)


_BACKWARD: dict[str, Callable] = {
    "matmul": lambda n, a: (matmul(a, transpose(n.inputs[1])), matmul(transpose(n.inputs[0]), a)),
    "transpose": lambda n, a: (transpose(a),),
    "add": lambda n, a: (a, a),
    "add_bias": lambda n, a: (a, sum_axis0(a)),
    "mul": lambda n, a: (mul(a, n.inputs[1]), mul(a, n.inputs[0])),
    "scale": lambda n, a: (scale(a, n.meta),),
    "relu": lambda n, a: (mask_pos(n.inputs[0], a),),
    "mask_pos": lambda n, a: (None, mask_pos(n.inputs[0], a)),
    "tanh": _bw_tanh,
    "exp": lambda n, a: (mul(a, n),),
    "log_softmax": _bw_log_softmax,
    "gather_rows": lambda n, a: (scatter_rows(a, n.meta[0], n.meta[1]),),
    "scatter_rows": lambda n, a: (gather_rows(a, n.meta[0]),),
    "sum_all": lambda n, a: (fill(n.meta, a),),
    "sum_axis0": lambda n, a: (broadcast_rows(a, n.meta),),
    "sum_axis1_keep": lambda n, a: (broadcast_cols(a, n.meta),),
    "broadcast_cols": lambda n, a: (sum_axis1_keep(a),),
    "broadcast_rows": lambda n, a: (sum_axis0(a),),
    "fill": lambda n, a: (sum_all(a),),
}


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in reversed(node.inputs):
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def grad_nodes(root: Node, wrt: Sequence[Node]) -> list[Node | None]:
    """Adjoint node per requested input; None where no gradient flows."""
    if root.value.shape != ():
        raise ValueError("can only differentiate a scalar node")
    adjoints: dict[int, Node] = {id(root): constant(1.0)}
    for node in reversed(_topo(root)):
        adj = adjoints.get(id(node))
        if adj is None or not node.inputs:
            continue
        for inp, contrib in zip(node.inputs, _BACKWARD[node.op](node, adj)):
            if contrib is None:
                continue
            prev = adjoints.get(id(inp))
            adjoints[id(inp)] = contrib if prev is None else add(prev, contrib)
    return [adjoints.get(id(w)) for w in wrt]


# ---------------------------------------------------------------------------
# Parameter-set level API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientVector:
    """Per-segment gradients mirroring a parameter set's shapes."""

    segments: tuple

    @property
    def total_len(self) -> int:
        return sum(s.size for s in self.segments)

    @property
    def shapes(self):
        return tuple(s.shape for s in self.segments)

    def flatten(self) -> np.ndarray:
        return np.concatenate([s.ravel() for s in self.segments])

    @classmethod
    def from_flat(cls, flat, shapes) -> "GradientVector":
        segs, ofs = [], 0
        for shp in shapes:
            size = int(np.prod(shp)) if shp else 1
            segs.append(np.asarray(flat[ofs : ofs + size]).reshape(shp))
            ofs += size
        if ofs != len(flat):
            raise ValueError("flat length does not match segment shapes")
        return cls(tuple(segs))

    @classmethod
    def zeros_like(cls, params) -> "GradientVector":
        return cls(tuple(np.zeros_like(np.asarray(p)) for p in params))

    def __add__(self, other: "GradientVector") -> "GradientVector":
        _check_same_shapes(self, other)
        return GradientVector(tuple(a + b for a, b in zip(self.segments, other.segments)))

    def __sub__(self, other: "GradientVector") -> "GradientVector":
        _check_same_shapes(self, other)
        return GradientVector(tuple(a - b for a, b in zip(self.segments, other.segments)))

    def scaled(self, c: float) -> "GradientVector":
        return GradientVector(tuple(s * c for s in self.segments))


def _check_same_shapes(g1: GradientVector, g2: GradientVector):
    if g1.shapes != g2.shapes:
        raise ValueError(f"segment shape mismatch: {g1.shapes} vs {g2.shapes}")


def grad_dot(g1: GradientVector, g2: GradientVector) -> float:
    """Sum over all elements of the segment-wise product."""
    _check_same_shapes(g1, g2)
    return float(sum(np.dot(a.ravel(), b.ravel()) for a, b in zip(g1.segments, g2.segments)))


class ScalarExpression:
    """Scalar-valued computation over a parameter set.

    Wraps a builder that maps parameter leaves (plus whatever data it
    closed over) to a scalar node. Rebuilding per evaluation keeps the
    expression usable at arbitrary parameter values, which the
    finite-difference paths rely on.
    """

    def __init__(self, builder: Callable[[Sequence[Node]], Node]):
        self._builder = builder

    def build(self, leaves: Sequence[Node]) -> Node:
        root = self._builder(leaves)
        if root.value.shape != ():
            raise ValueError("expression did not reduce to a scalar")
        return root

    def value(self, params: Sequence[np.ndarray]) -> float:
        return float(self.build([leaf(p) for p in params]).value)


def gradient(expr: ScalarExpression, params: Sequence[np.ndarray]) -> GradientVector:
    """Exact reverse-mode gradient of expr at params (params untouched)."""
    leaves = [leaf(p) for p in params]
    root = expr.build(leaves)
    adjs = grad_nodes(root, leaves)
    return GradientVector(
        tuple(
            a.value.copy() if a is not None else np.zeros_like(l.value)
            for a, l in zip(adjs, leaves)
        )
    )


def hvp(
    expr: ScalarExpression,
    params: Sequence[np.ndarray],
    v: GradientVector,
    mode: str = "exact",
) -> GradientVector:
    """Hessian-vector product of expr at params.

    ``exact`` differentiates the gradient a second time
    (reverse-over-reverse); ``fd`` uses the symmetric finite-difference
    form (grad(p + eps*v) - grad(p - eps*v)) / (2*eps) with
    eps = 1e-4 * (1 + max|p|).
    """
    shapes = tuple(np.asarray(p).shape for p in params)
    if v.shapes != shapes:
        raise ValueError(f"v shapes {v.shapes} do not match parameter shapes {shapes}")
    if mode == "exact":
        leaves = [leaf(p) for p in params]
        root = expr.build(leaves)
        gs = grad_nodes(root, leaves)
        parts = [dot_all(g, constant(vi)) for g, vi in zip(gs, v.segments) if g is not None]
        if not parts:
            return GradientVector.zeros_like(params)
        s = parts[0]
        for p in parts[1:]:
            s = add(s, p)
        hs = grad_nodes(s, leaves)
        return GradientVector(
            tuple(
                h.value.copy() if h is not None else np.zeros_like(l.value)
                for h, l in zip(hs, leaves)
            )
        )
    if mode == "fd":
        eps = 1e-4 * (1.0 + max(float(np.max(np.abs(p))) for p in params))
        plus = [np.asarray(p) + eps * vi for p, vi in zip(params, v.segments)]
        minus = [np.asarray(p) - eps * vi for p, vi in zip(params, v.segments)]
        return (gradient(expr, plus) - gradient(expr, minus)).scaled(1.0 / (2.0 * eps))
    raise ValueError(f"unknown hvp mode {mode!r}")


def kernel_backend_name() -> str:
    return K.NAME
