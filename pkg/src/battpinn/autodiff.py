"""Reverse-mode automatic differentiation over a recorded computation graph.

Every node lives in a :class:`Graph` arena and holds a float64 numpy array
(scalars are 0-d or size-1 arrays).  Values are computed eagerly when a node is
created.  :meth:`Graph.derive` walks the recorded graph backwards; with
``create_graph=True`` the vector-Jacobian products are themselves recorded as
graph nodes, so derivatives can be differentiated again to any order.

>>> g = Graph()
>>> x = g.variable(2.0)
>>> y = x * x * x
>>> (dy,) = g.derive(y, [x], create_graph=True)
>>> (d2y,) = g.derive(dy, [x])
>>> float(d2y.value)
12.0
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

LEAF_OPS = frozenset({"constant", "parameter", "variable"})


class AutodiffError(Exception):
    pass


class StructuralError(AutodiffError):
    """Malformed request: unknown node, foreign graph, bad shapes, non-scalar output."""


class DomainError(AutodiffError, ArithmeticError):
    """Evaluation left the domain of an operation (log of non-positive, divide by zero)."""


class Node:
    """Handle to one node of a :class:`Graph`.

    Handles are cheap; arithmetic on them records new nodes in the same graph.
    Parameter handles are re-pointed in place when the graph is reset.
    """

    __slots__ = ("graph", "id")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph._values[self.id]

    @property
    def shape(self) -> tuple:
        return self.graph._values[self.id].shape

    @property
    def op(self) -> str:
        return self.graph._ops[self.id]

    @property
    def parents(self) -> tuple:
        return self.graph._parents[self.id]

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.graph is not self.graph:
                raise StructuralError("operands belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph._binary("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph._binary("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph._binary("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph._binary("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph._binary("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph._binary("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph._binary("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph._binary("div", self._lift(other), self)

    def __neg__(self):
        return self.graph._push("neg", -self.value, (self.id,))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, index):
        return self.graph._push("getitem", self.value[index], (self.id,), index)

    @property
    def T(self) -> "Node":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Node":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Graph:
    """Growable node arena plus a registry of trainable parameter leaves."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._ops: list[str] = []
        self._parents: list[tuple] = []
        self._attrs: list = []
        self._params: list[Node] = []
        self._param_names: list[str] = []

    def __len__(self) -> int:
        return len(self._values)

    # -- construction -----------------------------------------------------

    def _push(self, op: str, value, parents: tuple = (), attr=None) -> Node:
        self._values.append(np.asarray(value, dtype=np.float64))
        self._ops.append(op)
        self._parents.append(parents)
        self._attrs.append(attr)
        return Node(self, len(self._values) - 1)

    def _binary(self, op: str, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if op == "add":
            out = av + bv
        elif op == "sub":
            out = av - bv
        elif op == "mul":
            out = av * bv
        else:
            if np.any(bv == 0.0):
                raise DomainError(f"division by zero (divisor node {b.id})")
            out = av / bv
        return self._push(op, out, (a.id, b.id))

    def constant(self, value) -> Node:
        return self._push("constant", np.array(value, dtype=np.float64))

    def variable(self, value) -> Node:
        """Differentiable leaf that is not trained (network inputs such as x and t)."""
        return self._push("variable", np.array(value, dtype=np.float64))

    def parameter(self, value, name: str = "") -> Node:
        node = self._push("parameter", np.array(value, dtype=np.float64), (), name)
        self._params.append(node)
        self._param_names.append(name or f"param{len(self._params) - 1}")
        return node

    @property
    def parameters(self) -> list[Node]:
        return list(self._params)

    def parameter_name(self, node: Node) -> str:
        for handle, name in zip(self._params, self._param_names):
            if handle.id == node.id:
                return name
        raise StructuralError(f"node {node.id} is not a registered parameter")

    def node(self, ref) -> Node:
        if isinstance(ref, Node):
            if ref.graph is not self:
                raise StructuralError("node belongs to a different graph")
            if not 0 <= ref.id < len(self._values):
                raise StructuralError(f"unknown node id {ref.id}")
            return ref
        if isinstance(ref, (int, np.integer)) and 0 <= int(ref) < len(self._values):
            return Node(self, int(ref))
        raise StructuralError(f"unknown node id {ref!r}")

    def set_value(self, ref, value) -> None:
        node = self.node(ref)
        if node.op != "parameter":
            raise StructuralError("only parameter values may be overwritten")
        new = np.array(value, dtype=np.float64)
        if new.shape != node.shape:
            raise StructuralError(f"shape {new.shape} does not match parameter shape {node.shape}")
        self._values[node.id][...] = new

    def reset(self) -> None:
        """Drop every non-parameter node; parameter handles are renumbered in place."""
        values = [self._values[h.id] for h in self._params]
        self._values = values
        self._ops = ["parameter"] * len(values)
        self._parents = [()] * len(values)
        self._attrs = list(self._param_names)
        for new_id, handle in enumerate(self._params):
            handle.id = new_id

    # -- evaluation and differentiation ----------------------------------

    def evaluate(self, ref) -> np.ndarray:
        """Value of a node; values are computed once, when the node is recorded."""
        return self._values[self.node(ref).id]

    def _ancestors(self, root: int) -> list[int]:
        seen = {root}
        stack = [root]
        parents = self._parents
        while stack:
            i = stack.pop()
            for p in parents[i]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return sorted(seen)

    def derive(self, output, wrt: Sequence, create_graph: bool = False) -> list[Node]:
        """Derivatives of a scalar ``output`` with respect to each node in ``wrt``.

        With ``create_graph`` the returned nodes are recorded functions of the
        graph and can be differentiated again.  Without it they are constants.
        A ``wrt`` node that ``output`` does not depend on gets a zero constant.
        """
        out = self.node(output)
        targets = [self.node(w) for w in wrt]
        adj = self._backward(out, targets, create_graph)
        results = []
        for t in targets:
            g = adj.get(t.id)
            if g is None:
                results.append(self.constant(np.zeros(t.shape)))
            elif create_graph:
                results.append(g)
            else:
                results.append(self.constant(g))
        return results

    def gradients(self, output, wrt: Sequence) -> list[np.ndarray]:
        """Like ``derive`` without graph recording, returning plain arrays."""
        out = self.node(output)
        targets = [self.node(w) for w in wrt]
        adj = self._backward(out, targets, False)
        return [
            np.array(adj[t.id], dtype=np.float64) if t.id in adj else np.zeros(t.shape)
            for t in targets
        ]

    def _backward(self, out: Node, targets: list[Node], create_graph: bool) -> dict:
        if out.value.size != 1:
            raise StructuralError(f"output must be scalar, got shape {out.shape}")
        target_ids = {t.id for t in targets}
        order = self._ancestors(out.id)
        parents = self._parents
        live = set()
        for i in order:
            if i in target_ids or any(p in live for p in parents[i]):
                live.add(i)
        if out.id not in live:
            return {}
        seed = np.ones(out.shape)
        adj = {out.id: self.constant(seed) if create_graph else seed}
        ops, attrs, values = self._ops, self._attrs, self._values
        for i in reversed(order):
            if i not in live or not parents[i]:
                continue
            g = adj.get(i)
            if g is None:
                continue
            pids = parents[i]
            if create_graph:
                args = [Node(self, p) for p in pids]
                res = Node(self, i)
            else:
                args = [values[p] for p in pids]
                res = values[i]
            contribs = _VJP[ops[i]](g, args, res, attrs[i])
            for p, c in zip(pids, contribs):
                if c is None or p not in live:
                    continue
                prev = adj.get(p)
                adj[p] = c if prev is None else prev + c
        return adj


# ---------------------------------------------------------------------------
# primitives usable on Nodes and plain arrays alike
# ---------------------------------------------------------------------------


def _unary(op: str, x: Node, value, attr=None) -> Node:
    return x.graph._push(op, value, (x.id,), attr)


def exp(x):
    if isinstance(x, Node):
        return _unary("exp", x, np.exp(x.value))
    return np.exp(x)


def log(x):
    if isinstance(x, Node):
        if np.any(x.value <= 0.0):
            raise DomainError(f"log of non-positive value (node {x.id})")
        return _unary("log", x, np.log(x.value))
    return np.log(x)


def tanh(x):
    if isinstance(x, Node):
        return _unary("tanh", x, np.tanh(x.value))
    return np.tanh(x)


def _sigmoid_value(v):
    # exp of a non-positive argument only, so neither tail overflows or cancels
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    if isinstance(x, Node):
        return _unary("sigmoid", x, _sigmoid_value(x.value))
    return _sigmoid_value(x)


def softplus(x):
    if isinstance(x, Node):
        return _unary("softplus", x, np.logaddexp(0.0, x.value))
    return np.logaddexp(0.0, x)


def power(x, exponent: float):
    p = float(exponent)
    if isinstance(x, Node):
        v = x.value
        if p != int(p) and np.any(v < 0.0):
            raise DomainError(f"fractional power of negative value (node {x.id})")
        if p < 0 and np.any(v == 0.0):
            raise DomainError(f"negative power of zero (node {x.id})")
        return _unary("pow", x, v**p, p)
    return np.power(x, p)


def matmul(a, b):
    if isinstance(a, Node) or isinstance(b, Node):
        if not isinstance(a, Node):
            a = b.graph.constant(a)
        if not isinstance(b, Node):
            b = a.graph.constant(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise StructuralError(f"matmul shapes {a.shape} and {b.shape} do not chain")
        return a.graph._push("matmul", a.value @ b.value, (a.id, b.id))
    return a @ b


def transpose(x):
    if isinstance(x, Node):
        return _unary("transpose", x, x.value.T)
    return x.T


def reduce_sum(x, axis=None, keepdims: bool = False):
    if isinstance(x, Node):
        return _unary("sum", x, np.sum(x.value, axis=axis, keepdims=keepdims), (axis, keepdims))
    return np.sum(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    shape = tuple(shape)
    if isinstance(x, Node):
        return _unary("reshape", x, x.value.reshape(shape), shape)
    return np.reshape(x, shape)


def _sum_to_value(v, shape):
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    v = v.sum(axis=tuple(range(lead))) if lead > 0 else v
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and v.shape[i] != 1)
    if axes:
        v = v.sum(axis=axes, keepdims=True)
    return v.reshape(shape)


def sum_to(x, shape):
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if isinstance(x, Node):
        if x.shape == shape:
            return x
        return _unary("sum_to", x, _sum_to_value(x.value, shape), shape)
    x = np.asarray(x)
    return _sum_to_value(x, shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if isinstance(x, Node):
        if x.shape == shape:
            return x
        return _unary("broadcast_to", x, np.broadcast_to(x.value, shape).copy(), shape)
    return np.broadcast_to(x, shape)


def scatter(x, index, shape):
    """Zeros of ``shape`` with ``x`` accumulated at ``index`` (adjoint of indexing)."""
    shape = tuple(shape)
    if isinstance(x, Node):
        return _unary("scatter", x, _scatter_value(x.value, index, shape), (index, shape))
    return _scatter_value(np.asarray(x), index, shape)


def _scatter_value(v, index, shape):
    out = np.zeros(shape)
    np.add.at(out, index, v)
    return out


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)
    if not parts:
        raise StructuralError("concat needs at least one part")
    if any(isinstance(p, Node) for p in parts):
        graph = next(p.graph for p in parts if isinstance(p, Node))
        nodes = [p if isinstance(p, Node) else graph.constant(p) for p in parts]
        try:
            value = np.concatenate([n.value for n in nodes], axis=axis)
        except ValueError as exc:
            raise StructuralError(str(exc)) from None
        sizes = tuple(n.value.shape[axis] for n in nodes)
        return graph._push("concat", value, tuple(n.id for n in nodes), (axis, sizes))
    return np.concatenate(parts, axis=axis)


# ---------------------------------------------------------------------------
# vector-Jacobian products; args/out are Nodes when recording, arrays otherwise
# ---------------------------------------------------------------------------


def _vjp_add(g, args, out, attr):
    a, b = args
    return sum_to(g, a.shape), sum_to(g, b.shape)


def _vjp_sub(g, args, out, attr):
    a, b = args
    return sum_to(g, a.shape), -sum_to(g, b.shape)


def _vjp_mul(g, args, out, attr):
    a, b = args
    return sum_to(g * b, a.shape), sum_to(g * a, b.shape)


def _vjp_div(g, args, out, attr):
    a, b = args
    ga = g / b
    return sum_to(ga, a.shape), sum_to(-(ga * out), b.shape)


def _vjp_neg(g, args, out, attr):
    return (-g,)


def _vjp_pow(g, args, out, attr):
    (a,) = args
    p = attr
    if p == 0.0:
        return (None,)
    if p == 1.0:
        return (g,)
    if p == 2.0:
        return (g * (2.0 * a),)
    return (g * (p * power(a, p - 1.0)),)


def _vjp_exp(g, args, out, attr):
    return (g * out,)


def _vjp_log(g, args, out, attr):
    return (g / args[0],)


def _vjp_tanh(g, args, out, attr):
    return (g * (1.0 - out * out),)


def _vjp_sigmoid(g, args, out, attr):
    return (g * (out * (1.0 - out)),)


def _vjp_softplus(g, args, out, attr):
    return (g * sigmoid(args[0]),)


def _vjp_matmul(g, args, out, attr):
    a, b = args
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_transpose(g, args, out, attr):
    return (transpose(g),)


def _vjp_sum(g, args, out, attr):
    (a,) = args
    axis, keepdims = attr
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(a.shape) for ax in axes)
        kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        g = reshape(g, kept)
    return (broadcast_to(g, a.shape),)


def _vjp_sum_to(g, args, out, attr):
    return (broadcast_to(g, args[0].shape),)


def _vjp_broadcast_to(g, args, out, attr):
    return (sum_to(g, args[0].shape),)


def _vjp_reshape(g, args, out, attr):
    return (reshape(g, args[0].shape),)


def _vjp_getitem(g, args, out, attr):
    return (scatter(g, attr, args[0].shape),)


def _vjp_scatter(g, args, out, attr):
    index, _ = attr
    return (g[index],)


def _vjp_concat(g, args, out, attr):
    axis, sizes = attr
    ndim = len(args[0].shape)
    ax = axis % ndim
    pieces = []
    start = 0
    for size in sizes:
        idx = tuple(slice(start, start + size) if i == ax else slice(None) for i in range(ndim))
        pieces.append(g[idx])
        start += size
    return tuple(pieces)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "pow": _vjp_pow,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "softplus": _vjp_softplus,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "sum": _vjp_sum,
    "sum_to": _vjp_sum_to,
    "broadcast_to": _vjp_broadcast_to,
    "reshape": _vjp_reshape,
    "getitem": _vjp_getitem,
    "scatter": _vjp_scatter,
    "concat": _vjp_concat,
}


def evaluate(graph: Graph, ref) -> np.ndarray:
    return graph.evaluate(ref)


def derive(graph: Graph, output, wrt: Sequence, create_graph: bool = False) -> list[Node]:
    return graph.derive(output, wrt, create_graph=create_graph)
