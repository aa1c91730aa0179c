"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records operations in execution order, so the node list is
topologically sorted by construction. :func:`backward` walks it in reverse.

Batched operands are allowed: ``matmul`` broadcasts over leading axes and the
row-wise ops (``softmax_rows``, ``layernorm_rows``) act on the last axis.

Example
-------
>>> tape = Tape()
>>> w = tape.leaf(np.array([[1.0]]))
>>> x = tape.constant(np.array([[2.0]]))
>>> loss = tape.scale(tape.sum(tape.matmul(w, x)), 1.0)
>>> backward(tape, loss)[w]
array([[2.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .exceptions import ShapeError

LAYERNORM_EPS = 1e-5

OP_KINDS = (
    "matmul",
    "add",
    "scale",
    "relu",
    "softmax_rows",
    "layernorm_rows",
    "embed_lookup",
    "cross_entropy",
    "transpose",
    "reshape",
    "sum",
)


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to one node of a tape."""

    id: int
    shape: tuple
    tape: "Tape" = field(repr=False)

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    def __hash__(self):
        return hash((id(self.tape), self.id))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.id == self.id


@dataclass
class _Node:
    op: str
    inputs: tuple
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)
    cache: Any = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class Tape:
    """Single-owner record of one forward computation."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _push(self, op, inputs, value, requires_grad, attrs=None, cache=None) -> Var:
        node = _Node(op, tuple(v.id for v in inputs), value, requires_grad, attrs or {}, cache)
        self.nodes.append(node)
        return Var(len(self.nodes) - 1, value.shape, self)

    def _check(self, inputs):
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"Var {v.id} belongs to a different tape")

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return self._push("leaf", (), np.asarray(value, dtype=np.float64), requires_grad)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, op_kind: str, inputs, **attrs) -> Var:
        """Evaluate ``op_kind`` on ``inputs`` and append it to the tape."""
        try:
            fwd = _FORWARD[op_kind]
        except KeyError:
            raise ValueError(f"unknown op kind {op_kind!r}") from None
        inputs = tuple(inputs)
        self._check(inputs)
        values = [self.nodes[v.id].value for v in inputs]
        value, cache = fwd(values, attrs)
        requires_grad = any(self.nodes[v.id].requires_grad for v in inputs)
        return self._push(op_kind, inputs, value, requires_grad, attrs, cache)

    # thin wrappers, mostly for readability at call sites
    def matmul(self, a: Var, b: Var) -> Var:
        return self.record("matmul", (a, b))

    def add(self, a: Var, b: Var) -> Var:
        return self.record("add", (a, b))

    def scale(self, a: Var, c: float) -> Var:
        return self.record("scale", (a,), c=float(c))

    def relu(self, a: Var) -> Var:
        return self.record("relu", (a,))

    def softmax_rows(self, a: Var) -> Var:
        return self.record("softmax_rows", (a,))

    def layernorm_rows(self, a: Var) -> Var:
        return self.record("layernorm_rows", (a,))

    def embed_lookup(self, table: Var, ids) -> Var:
        return self.record("embed_lookup", (table,), ids=np.asarray(ids, dtype=np.int64))

    def cross_entropy(self, logits: Var, targets) -> Var:
        return self.record("cross_entropy", (logits,), targets=np.asarray(targets, dtype=np.int64))

    def transpose(self, a: Var, axes=None) -> Var:
        if axes is None:
            axes = tuple(range(len(a.shape) - 2)) + (len(a.shape) - 1, len(a.shape) - 2)
        return self.record("transpose", (a,), axes=tuple(axes))

    def reshape(self, a: Var, shape) -> Var:
        return self.record("reshape", (a,), shape=tuple(shape))

    def sum(self, a: Var) -> Var:
        return self.record("sum", (a,))


# ---------------------------------------------------------------- forward rules


def _mm(a, b):
    if b.ndim == 2 and a.ndim > 2:
        # one BLAS call instead of a loop over the leading axes
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return np.matmul(a, b)


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _mm(a, b), None


def _fwd_add(vals, attrs):
    a, b = vals
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    if out_shape != a.shape and out_shape != b.shape:
        raise ShapeError(f"add: neither operand has the result shape ({a.shape}, {b.shape})")
    return a + b, None


def _fwd_scale(vals, attrs):
    return vals[0] * attrs["c"], None


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0), None


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_softmax(vals, attrs):
    y = _softmax(vals[0])
    return y, y


def _fwd_layernorm(vals, attrs):
    x = vals[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYERNORM_EPS)
    y = xc * inv
    return y, (y, inv)


def _fwd_embed(vals, attrs):
    table = vals[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids out of range for table {table.shape}")
    return table[ids], None


def _fwd_cross_entropy(vals, attrs):
    logits = vals[0]
    targets = attrs["targets"]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}"
        )
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(t.size), t].mean()
    return np.full((1, 1), loss), np.exp(logp)


def _fwd_transpose(vals, attrs):
    axes = attrs["axes"]
    if sorted(axes) != list(range(vals[0].ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {vals[0].shape}")
    return np.transpose(vals[0], axes), None


def _fwd_reshape(vals, attrs):
    try:
        return vals[0].reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {vals[0].shape} to {attrs['shape']}") from None


def _fwd_sum(vals, attrs):
    return np.full((1, 1), vals[0].sum()), None


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "scale": _fwd_scale,
    "relu": _fwd_relu,
    "softmax_rows": _fwd_softmax,
    "layernorm_rows": _fwd_layernorm,
    "embed_lookup": _fwd_embed,
    "cross_entropy": _fwd_cross_entropy,
    "transpose": _fwd_transpose,
    "reshape": _fwd_reshape,
    "sum": _fwd_sum,
}


# --------------------------------------------------------------- backward rules


def _vjp(node: _Node, g: np.ndarray, vals: list, need: list) -> list:
    """Vector-Jacobian products; entries whose ``need`` flag is False may be None."""
    op = node.op
    if op == "matmul":
        a, b = vals
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            if need[0]:
                ga = _mm(g, b.T)
            if need[1]:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            if need[0]:
                ga = _unbroadcast(g @ _swap(b), a.shape)
            if need[1]:
                gb = _unbroadcast(_swap(a) @ g, b.shape)
        return [ga, gb]
    if op == "add":
        return [
            _unbroadcast(g, vals[0].shape) if need[0] else None,
            _unbroadcast(g, vals[1].shape) if need[1] else None,
        ]
    if op == "scale":
        return [g * node.attrs["c"]]
    if op == "relu":
        return [g * (vals[0] > 0.0)]
    if op == "softmax_rows":
        y = node.cache
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]
    if op == "layernorm_rows":
        y, inv = node.cache
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - y * gy)]
    if op == "embed_lookup":
        out = np.zeros_like(vals[0])
        ids = node.attrs["ids"]
        np.add.at(out, ids.reshape(-1), g.reshape(-1, out.shape[1]))
        return [out]
    if op == "cross_entropy":
        p = node.cache.copy()
        t = node.attrs["targets"].reshape(-1)
        p[np.arange(t.size), t] -= 1.0
        return [(p * (g.item() / t.size)).reshape(vals[0].shape)]
    if op == "transpose":
        return [np.transpose(g, np.argsort(node.attrs["axes"]))]
    if op == "reshape":
        return [g.reshape(vals[0].shape)]
    if op == "sum":
        return [np.full(vals[0].shape, g.item())]
    raise AssertionError(f"no backward rule for {op}")


def backward(tape: Tape, loss: Var) -> dict[Var, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every trainable leaf.

    Leaves that do not influence the loss receive a zero gradient.
    """
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if int(np.prod(loss.shape)) != 1:
        raise ShapeError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    grads[loss.id] = np.ones(loss.shape)
    for i in range(loss.id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or not node.requires_grad or node.op == "leaf":
            continue
        vals = [nodes[j].value for j in node.inputs]
        need = [nodes[j].requires_grad for j in node.inputs]
        for j, nj, gj in zip(node.inputs, need, _vjp(node, g, vals, need)):
            if not nj:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for i, node in enumerate(nodes):
        if node.op == "leaf" and node.requires_grad:
            g = grads[i]
            out[Var(i, node.value.shape, tape)] = np.zeros_like(node.value) if g is None else g
    return out
