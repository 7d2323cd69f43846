"""Tape-based reverse-mode differentiation over a fixed op vocabulary.

A ``Graph`` records op applications during one forward pass; ``backward``
walks the records in reverse, accumulating gradients into the ``Parameter``
leaves.  ``finite_diff`` is the central-difference oracle used by the
gradient-check suite.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from . import tensor
from .errors import ContractError, NumericError, ShapeError, StateError

_param_ids = itertools.count()


class Parameter:
    """A trainable leaf: value plus persistent accumulated gradient.

    ``kind`` tags the parameter's role ("conv_w", "bn_gamma", "pvlu_alpha",
    ...) so freeze policies can select by category.
    """

    __slots__ = ("id", "value", "grad", "trainable", "name", "kind")

    def __init__(self, value, name="", trainable=True, kind="param"):
        self.id = next(_param_ids)
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = bool(trainable)
        self.name = name
        self.kind = kind

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter(id={self.id}, name={self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class Node:
    """One value in a recorded computation."""

    __slots__ = ("value", "grad", "param")

    def __init__(self, value, param=None):
        self.value = value
        self.grad = None
        self.param = param


class OpRecord:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Graph:
    """Topologically ordered op records from one forward pass."""

    def __init__(self):
        self.records: list[OpRecord] = []
        self._nodes: list[Node] = []
        self._leaves: list[tuple[Parameter, Node]] = []
        self._leaf_index: dict[int, Node] = {}
        self._node_ids: set[int] = set()
        self.presoftmax: Node | None = None
        self.output: Node | None = None

    def _register(self, node):
        self._nodes.append(node)
        self._node_ids.add(id(node))
        return node

    def leaf(self, param: Parameter) -> Node:
        """Leaf node for a Parameter; one node per parameter per graph."""
        node = self._leaf_index.get(param.id)
        if node is None:
            node = self._register(Node(param.value, param=param))
            self._leaf_index[param.id] = node
            self._leaves.append((param, node))
        return node

    def constant(self, value) -> Node:
        return self._register(Node(np.asarray(value)))

    def record(self, op: str, inputs, value, vjp: Callable) -> Node:
        """Append an op record; ``vjp(upstream)`` must return one gradient
        (or None) per input, in order."""
        out = self._register(Node(value))
        self.records.append(OpRecord(op, tuple(inputs), out, vjp))
        return out

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Reverse pass from a scalar loss; accumulates (+=) into Parameter
        grads and returns this pass's contribution per parameter id."""
        if id(loss) not in self._node_ids:
            raise StateError("loss node does not belong to this graph")
        if np.shape(loss.value) != ():
            raise ContractError(f"loss must be rank-0, got shape {np.shape(loss.value)}")
        if not self.records:
            raise StateError("backward before any recorded forward")
        for node in self._nodes:
            node.grad = None
        loss.grad = np.ones((), dtype=np.asarray(loss.value).dtype)
        for rec in reversed(self.records):
            upstream = rec.output.grad
            if upstream is None:
                continue
            grads = rec.vjp(upstream)
            for node, g in zip(rec.inputs, grads):
                if g is None:
                    continue
                if g.shape != np.shape(node.value):
                    raise ShapeError(f"{rec.op}: vjp produced {g.shape} for input of shape {np.shape(node.value)}")
                node.grad = g if node.grad is None else node.grad + g
        table = {}
        for param, node in self._leaves:
            if node.grad is None:
                continue
            g = node.grad.astype(param.value.dtype, copy=False)
            param.grad = param.grad + g
            table[param.id] = g
        return table


# ---------------------------------------------------------------------------
# Tape ops.  Each takes the graph plus input nodes and returns the output
# node.  Layer-specific ops (batchnorm, activations) live with their layers.

def add(g: Graph, a: Node, b: Node) -> Node:
    if np.shape(a.value) != np.shape(b.value):
        raise ShapeError(f"add: shapes differ {np.shape(a.value)} vs {np.shape(b.value)}")
    return g.record("add", (a, b), a.value + b.value, lambda up: (up, up))


def mul(g: Graph, a: Node, b: Node) -> Node:
    if np.shape(a.value) != np.shape(b.value):
        raise ShapeError(f"mul: shapes differ {np.shape(a.value)} vs {np.shape(b.value)}")
    av, bv = a.value, b.value
    return g.record("mul", (a, b), av * bv, lambda up: (up * bv, up * av))


def sum_all(g: Graph, a: Node) -> Node:
    shape = np.shape(a.value)
    dtype = np.asarray(a.value).dtype
    value = np.asarray(np.asarray(a.value, dtype=np.float64).sum(), dtype=dtype)
    return g.record("sum", (a,), value, lambda up: (np.full(shape, up, dtype=dtype),))


def matmul(g: Graph, a: Node, b: Node) -> Node:
    out = tensor.matmul(a.value, b.value)
    av, bv = a.value, b.value

    def vjp(up):
        return up @ bv.T, av.T @ up

    return g.record("matmul", (a, b), out, vjp)


def bias_add(g: Graph, x: Node, b: Node) -> Node:
    """Add a per-channel bias [C] onto [N,C,...]."""
    xv = x.value
    if xv.ndim < 2 or b.value.shape != (xv.shape[1],):
        raise ShapeError(f"bias_add: bias {b.value.shape} does not fit input {xv.shape}")
    out = tensor.ew(xv, b.value, "add")
    axes = (0,) + tuple(range(2, xv.ndim))

    def vjp(up):
        db = up.sum(axis=axes, dtype=np.float64).astype(b.value.dtype)
        return up, db

    return g.record("bias_add", (x, b), out, vjp)


def conv2d(g: Graph, x: Node, w: Node, stride=1, padding="same") -> Node:
    out, col, pads = tensor.conv2d_with_col(x.value, w.value, stride, padding)
    x_shape, kernel = x.value.shape, w.value

    def vjp(up):
        return tensor.conv2d_backward(up, col, x_shape, kernel, stride, pads)

    return g.record("conv2d", (x, w), out, vjp)


def maxpool2d(g: Graph, x: Node, window, stride=None) -> Node:
    out, idx = tensor.maxpool2d(x.value, window, stride)
    _, _, h, w = x.value.shape

    def vjp(up):
        return (tensor.maxpool2d_backward(up, idx, h, w),)

    return g.record("maxpool2d", (x,), out, vjp)


def reshape(g: Graph, x: Node, shape) -> Node:
    old = x.value.shape
    out = np.ascontiguousarray(x.value).reshape(shape)
    return g.record("reshape", (x,), out, lambda up: (np.ascontiguousarray(up).reshape(old),))


def flatten(g: Graph, x: Node) -> Node:
    n = x.value.shape[0]
    return reshape(g, x, (n, -1))


def dropout(g: Graph, x: Node, rate: float, rng: np.random.Generator) -> Node:
    """Inverted-scaling dropout; the mask is saved on the tape so backward
    matches forward exactly."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.value.shape) >= rate).astype(x.value.dtype)
    scale = np.asarray(1.0 / keep, dtype=x.value.dtype)
    out = x.value * mask * scale
    return g.record("dropout", (x,), out, lambda up: (up * mask * scale,))


def softmax(g: Graph, x: Node) -> Node:
    """Row softmax with max-shift; outputs sum to 1 along the last axis."""
    z = x.value
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(up):
        return ((up - (up * p).sum(axis=-1, keepdims=True)) * p,)

    return g.record("softmax", (x,), p, vjp)


def cross_entropy_logits(g: Graph, logits: Node, labels) -> Node:
    """Mean cross-entropy fused with softmax (log-sum-exp shift)."""
    z = logits.value
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ContractError(f"labels outside [0, {z.shape[1]}) range")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, dtype=np.float64)) + zmax[:, 0].astype(np.float64)
    picked = z[np.arange(n), labels].astype(np.float64)
    loss = np.asarray((lse - picked).mean(), dtype=z.dtype)
    if not np.isfinite(loss):
        raise NumericError("cross-entropy loss is not finite")

    def vjp(up):
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return ((p * (up / n)).astype(z.dtype),)

    return g.record("cross_entropy", (logits,), loss, vjp)


# Bind the op vocabulary as Graph methods so call sites read as
# ``graph.conv2d(x, w)`` instead of ``autodiff.conv2d(graph, x, w)``.
for _op in (add, mul, sum_all, matmul, bias_add, conv2d, maxpool2d,
            reshape, flatten, dropout, softmax, cross_entropy_logits):
    setattr(Graph, _op.__name__, _op)


def finite_diff(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. every element of
    ``p.value`` (64-bit mode only)."""
    if p.value.dtype != np.float64:
        raise ContractError("finite_diff requires float64 parameters")
    grad = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff: non-finite objective at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
