"""Reverse-mode automatic differentiation on a small fixed set of primitives.

Graphs are built eagerly: every operation computes its value when the node
is created, so builders may branch on intermediate values (the matrix
exponential picks its scaling depth this way). `forward` re-evaluates a
recorded graph under new input bindings, `backward` populates adjoints.

Broadcasting is deliberately narrow: elementwise ops require equal shapes
except for scalar-with-array and adding a row vector to a matrix (bias).
Matrix products are 2-d @ 2-d or stacked 3-d @ 3-d with equal batch size.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidStateError

_ids = itertools.count()

OP_KINDS = (
    "input", "add", "sub", "mul", "matmul", "sum", "mean", "exp", "log",
    "tanh", "sigmoid", "softmax_t", "square", "sqrt", "relu", "reshape",
    "concat", "slice", "frob_sq",
)


class Node:
    """One vertex of a computation graph.

    Holds the operation kind, parent nodes, the current value, and the
    adjoint filled in by backward. Input nodes have no parents.
    """

    __slots__ = ("op", "parents", "value", "adjoint", "requires_grad",
                 "name", "_fwd", "_vjp")

    def __init__(self, op, parents, value, requires_grad, fwd=None, vjp=None,
                 name=None):
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.adjoint = None
        self.requires_grad = requires_grad
        self.name = name if name is not None else f"{op}#{next(_ids)}"
        self._fwd = fwd
        self._vjp = vjp

    def __repr__(self):
        return f"Node({self.name}, shape={np.shape(self.value)})"

    # Arithmetic sugar so builders read like formulas.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def input_node(value, name=None, requires_grad=True) -> Node:
    """Leaf node carrying a bound value; the unit `forward` rebinds."""
    return Node("input", (), _as_value(value), requires_grad, name=name)


def constant(value, name=None) -> Node:
    return input_node(value, name=name, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op, parents, fwd, vjp, name=None) -> Node:
    parents = tuple(as_node(p) for p in parents)
    value = fwd(*(p.value for p in parents))
    rg = any(p.requires_grad for p in parents)
    return Node(op, parents, value, rg, fwd=fwd, vjp=vjp, name=name)


# ---------------------------------------------------------------------------
# elementwise binary ops with the narrow broadcast rules

def _broadcast_mode(sa, sb):
    if sa == sb:
        return "same"
    if sa == ():
        return "scalar_left"
    if sb == ():
        return "scalar_right"
    if len(sa) == 2 and sb == (sa[1],):
        return "bias_right"
    if len(sb) == 2 and sa == (sb[1],):
        return "bias_left"
    raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")


def _reduce_to(g, shape, mode, side):
    # Collapse a full-shape gradient back onto the broadcast operand.
    if mode == "same":
        return g
    if (mode == "scalar_left" and side == 0) or (mode == "scalar_right" and side == 1):
        return np.asarray(np.sum(g))
    if (mode == "bias_right" and side == 1) or (mode == "bias_left" and side == 0):
        return np.sum(g, axis=0)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    mode = _broadcast_mode(np.shape(a.value), np.shape(b.value))

    def vjp(node, g):
        return (_reduce_to(g, None, mode, 0), _reduce_to(g, None, mode, 1))

    return _make("add", (a, b), lambda x, y: x + y, vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    mode = _broadcast_mode(np.shape(a.value), np.shape(b.value))

    def vjp(node, g):
        return (_reduce_to(g, None, mode, 0), _reduce_to(-g, None, mode, 1))

    return _make("sub", (a, b), lambda x, y: x - y, vjp)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    mode = _broadcast_mode(np.shape(a.value), np.shape(b.value))
    if mode.startswith("bias"):
        raise DimensionError("elementwise mul supports equal shapes or a scalar")

    def vjp(node, g):
        x, y = node.parents[0].value, node.parents[1].value
        return (_reduce_to(g * y, None, mode, 0), _reduce_to(g * x, None, mode, 1))

    return _make("mul", (a, b), lambda x, y: x * y, vjp)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    ok = (len(sa) == len(sb) == 2 and sa[1] == sb[0]) or (
        len(sa) == len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1])
    if not ok:
        raise DimensionError(f"matmul needs (m,k)@(k,n) or (b,m,k)@(b,k,n), "
                             f"got {sa} and {sb}")

    def vjp(node, g):
        x, y = node.parents[0].value, node.parents[1].value
        return (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g)

    return _make("matmul", (a, b), lambda x, y: x @ y, vjp)


# ---------------------------------------------------------------------------
# reductions

def sum_(a, axis=None) -> Node:
    a = as_node(a)
    shape = np.shape(a.value)

    def fwd(x):
        return np.asarray(np.sum(x, axis=axis))

    def vjp(node, g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", (a,), fwd, vjp)


def mean_(a, axis=None) -> Node:
    a = as_node(a)
    shape = np.shape(a.value)
    count = int(np.prod(shape)) if axis is None else shape[axis]

    def fwd(x):
        return np.asarray(np.mean(x, axis=axis))

    def vjp(node, g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _make("mean", (a,), fwd, vjp)


def frob_sq(a) -> Node:
    """Sum of squared entries, the building block for norms."""
    a = as_node(a)

    def vjp(node, g):
        return (2.0 * node.parents[0].value * g,)

    return _make("frob_sq", (a,), lambda x: np.asarray(np.sum(x * x)), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops

def exp_(a) -> Node:
    def vjp(node, g):
        return (g * node.value,)

    return _make("exp", (a,), np.exp, vjp)


def log_(a) -> Node:
    def vjp(node, g):
        return (g / node.parents[0].value,)

    return _make("log", (a,), np.log, vjp)


def tanh_(a) -> Node:
    def vjp(node, g):
        return (g * (1.0 - node.value * node.value),)

    return _make("tanh", (a,), np.tanh, vjp)


def sigmoid_(a) -> Node:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def vjp(node, g):
        y = node.value
        return (g * y * (1.0 - y),)

    return _make("sigmoid", (a,), fwd, vjp)


def square(a) -> Node:
    def vjp(node, g):
        return (2.0 * node.parents[0].value * g,)

    return _make("square", (a,), lambda x: x * x, vjp)


def sqrt_(a) -> Node:
    """Elementwise square root; the subgradient at zero is taken as zero."""
    def vjp(node, g):
        y = node.value
        safe = np.where(y > 0.0, y, 1.0)
        return (g * np.where(y > 0.0, 0.5 / safe, 0.0),)

    return _make("sqrt", (a,), np.sqrt, vjp)


def relu_(a) -> Node:
    """Rectifier; the subgradient at zero is taken as zero."""
    def vjp(node, g):
        return (g * (node.parents[0].value > 0.0),)

    return _make("relu", (a,), lambda x: np.maximum(x, 0.0), vjp)


def softmax_t(a, tau: float) -> Node:
    """Row-wise softmax of a / tau along the last axis."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")

    def fwd(x):
        z = x / tau
        z = z - np.max(z, axis=-1, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=-1, keepdims=True)

    def vjp(node, g):
        y = node.value
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner) / tau,)

    return _make("softmax_t", (a,), fwd, vjp)


# ---------------------------------------------------------------------------
# structural ops

def reshape_(a, shape) -> Node:
    a = as_node(a)
    old = np.shape(a.value)
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape

    def vjp(node, g):
        return (np.reshape(g, old),)

    return _make("reshape", (a,), lambda x: np.reshape(x, shape), vjp)


def concat_(parts, axis=0) -> Node:
    parts = [as_node(p) for p in parts]
    sizes = [np.shape(p.value)[axis] for p in parts]

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(node, g):
        out, start = [], 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            out.append(g[tuple(sl)])
            start += s
        return tuple(out)

    return _make("concat", parts, fwd, vjp)


def slice_(a, axis: int, start: int, stop: int) -> Node:
    """Contiguous slab a[..., start:stop, ...] along one axis."""
    a = as_node(a)
    shape = np.shape(a.value)
    if not 0 <= start <= stop <= shape[axis]:
        raise DimensionError(
            f"slice [{start}:{stop}] out of bounds for axis {axis} of {shape}")
    key = [slice(None)] * len(shape)
    key[axis] = slice(start, stop)
    key = tuple(key)

    def vjp(node, g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make("slice", (a,), lambda x: x[key].copy(), vjp)


def pick(a, axis: int, index: int) -> Node:
    """Width-one slice collapsed to remove the sliced axis."""
    sl = slice_(a, axis, index, index + 1)
    shape = list(np.shape(sl.value))
    shape.pop(axis)
    return reshape_(sl, tuple(shape))


def detach(a: Node) -> Node:
    """Copy of a value cut out of the gradient flow (and out of re-forwarding)."""
    return constant(np.array(a.value, copy=True), name=f"detach({a.name})")


# ---------------------------------------------------------------------------
# graph execution

def topo_order(out: Node) -> list[Node]:
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def _resolve_bindings(order, bindings):
    by_name = {}
    resolved = {}
    for node in order:
        if node.op == "input":
            by_name[node.name] = node
    for key, val in (bindings or {}).items():
        node = key if isinstance(key, Node) else by_name.get(key)
        if node is None:
            raise KeyError(f"no input node named {key!r} in graph")
        if node.op != "input":
            raise ValueError(f"cannot bind non-input node {node.name}")
        arr = _as_value(val)
        if arr.shape != node.value.shape:
            raise DimensionError(
                f"binding for {node.name} has shape {arr.shape}, "
                f"expected {node.value.shape}")
        resolved[id(node)] = (node, arr)
    return resolved


def forward(out: Node, bindings=None) -> np.ndarray:
    """Re-evaluate the graph below `out`, substituting bound input values."""
    order = topo_order(out)
    resolved = _resolve_bindings(order, bindings)
    for node in order:
        if node.op == "input":
            hit = resolved.get(id(node))
            if hit is not None:
                node.value = hit[1]
        else:
            node.value = node._fwd(*(p.value for p in node.parents))
    return out.value


def backward(out: Node, wrt=None) -> dict[Node, np.ndarray]:
    """Populate adjoints below `out` and return input-node gradients.

    `out` must hold a single value. When `wrt` lists specific input nodes,
    each is guaranteed a gradient entry, zeros if it does not feed `out`.
    """
    if np.size(out.value) != 1:
        raise InvalidStateError(
            f"backward needs a scalar output, got shape {np.shape(out.value)}")
    order = topo_order(out)
    for node in order:
        node.adjoint = None
    acc = {id(out): np.ones_like(np.asarray(out.value))}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            node.adjoint = np.zeros_like(np.asarray(node.value))
            continue
        node.adjoint = g
        if not node.requires_grad or node.op == "input":
            continue
        for parent, pg in zip(node.parents, node._vjp(node, g)):
            if not parent.requires_grad:
                continue
            prev = acc.get(id(parent))
            acc[id(parent)] = pg if prev is None else prev + pg
    grads = {node: node.adjoint for node in order
             if node.op == "input" and node.requires_grad}
    if wrt is not None:
        grads = {n: grads.get(n, np.zeros_like(np.asarray(n.value))) for n in wrt}
        for n, g in grads.items():
            n.adjoint = g
    return grads


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    step: float
    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def check_gradients(out: Node, bindings=None, tolerance: float = 1e-6,
                    wrt=None, step: float = 1e-5) -> GradCheckReport:
    """Compare backward gradients against central finite differences.

    Every element of every checked input is perturbed by +-step. The
    relative error uses max(|analytic|, |numeric|, 1e-4) as denominator so
    near-zero gradients are judged on an absolute scale.
    """
    order = topo_order(out)
    if wrt is None:
        wrt = [n for n in order if n.op == "input" and n.requires_grad]
    base = {n: np.array(n.value, copy=True) for n in order if n.op == "input"}
    if bindings:
        for key, val in _resolve_bindings(order, bindings).values():
            base[key] = _as_value(val)
    forward(out, base)
    grads = backward(out, wrt=wrt)

    report = GradCheckReport(True, tolerance, step, 0.0)
    for node in wrt:
        analytic = grads[node]
        numeric = np.zeros_like(analytic)
        work = dict(base)
        for idx in np.ndindex(*node.value.shape) if node.value.ndim else [()]:
            probes = []
            for sign in (1.0, -1.0):
                pert = np.array(base[node], copy=True)
                pert[idx] += sign * step
                work[node] = pert
                probes.append(float(forward(out, work)))
            numeric[idx] = (probes[0] - probes[1]) / (2.0 * step)
        work[node] = base[node]
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
        rel = np.abs(analytic - numeric) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.per_input[node.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        if worst > tolerance:
            report.passed = False
            report.failures.append(
                f"{node.name}: max rel error {worst:.3e} exceeds {tolerance:.1e}")
    forward(out, base)
    return report


# ---------------------------------------------------------------------------
# parameters and the optimizer

class ParameterSet:
    """Named float64 parameter arrays plus Adam moment state."""

    def __init__(self, values: dict):
        self.values = {k: _as_value(v) for k, v in values.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.step = 0

    def copy(self) -> "ParameterSet":
        out = ParameterSet({k: v.copy() for k, v in self.values.items()})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def nodes(self) -> dict:
        """Fresh input nodes bound to the current parameter values."""
        return {k: input_node(v, name=k) for k, v in self.values.items()}


def adam_update(params: ParameterSet, grads: dict, lr: float,
                beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> ParameterSet:
    """One Adam step with bias correction, applied in place.

    Parameters absent from `grads` keep their values and moments.
    """
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for key, g in grads.items():
        if key not in params.values:
            raise KeyError(f"gradient for unknown parameter {key!r}")
        if np.shape(g) != params.values[key].shape:
            raise DimensionError(
                f"gradient shape {np.shape(g)} does not match parameter "
                f"{key!r} of shape {params.values[key].shape}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for key in params.values:
        if key not in grads:
            continue
        g = _as_value(grads[key])
        params.m[key] = beta1 * params.m[key] + (1.0 - beta1) * g
        params.v[key] = beta2 * params.v[key] + (1.0 - beta2) * (g * g)
        m_hat = params.m[key] / c1
        v_hat = params.v[key] / c2
        params.values[key] = params.values[key] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params
