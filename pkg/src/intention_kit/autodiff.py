"""Reverse-mode automatic differentiation over numpy arrays.

Values are float64 arrays of rank >= 2; the last two axes are the matrix
rows and columns and any leading axes are a batch. Nodes are numbered at
creation, which is a valid topological order, so :func:`backward` simply
walks the reachable nodes by decreasing id.
"""

from __future__ import annotations

import itertools
import json
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .linalg import (
    DEFAULT_RTOL,
    ContractError,
    DimensionError,
    matrix_from_json,
    matrix_to_json,
    pinv,
)

_ids = itertools.count()
_local = threading.local()

LAYERNORM_EPS = 1e-5
LEAKY_SLOPE = 0.01


class Tape:
    """Records the nodes created inside a ``with Tape():`` block."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def clear(self):
        self.nodes.clear()


def _record(node: "Node"):
    stack = getattr(_local, "tapes", None)
    if stack:
        stack[-1].nodes.append(node)


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name", "id")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_rule=None,
                 requires_grad: bool | None = None, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim < 2:
            value = value.reshape((1,) * (2 - value.ndim) + value.shape)
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        _record(self)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    # operator sugar keeps model code readable
    def __matmul__(self, other):
        return op_matmul(self, other)

    def __add__(self, other):
        return op_add(self, other)

    def __sub__(self, other):
        return op_sub(self, other)

    def __mul__(self, other):
        return op_mul(self, other)

    @property
    def T(self):
        return op_transpose(self)


def Parameter(value, name: str | None = None) -> Node:
    node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)
    node.zero_grad()
    return node


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value, parents, rule) -> Node:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value, requires_grad=False)


# -- elementary ops ---------------------------------------------------------

def op_matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if b.value.ndim == 2 and a.value.ndim > 2:
        # batched rows times a shared matrix: fold the batch into the rows
        a2 = a.value.reshape(-1, a.shape[-1])
        out = (a2 @ b.value).reshape(a.shape[:-1] + (b.shape[-1],))

        def rule(g):
            g2 = g.reshape(-1, g.shape[-1])
            return ((g2 @ b.value.T).reshape(a.shape), a2.T @ g2)
        return _make(out, (a, b), rule)
    out = a.value @ b.value

    def rule(g):
        return (_unbroadcast(g @ b.value.swapaxes(-1, -2), a.shape),
                _unbroadcast(a.value.swapaxes(-1, -2) @ g, b.shape))
    return _make(out, (a, b), rule)


def op_add(a, b) -> Node:
    a, b = constant(a), constant(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def op_sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def op_mul(a, b) -> Node:
    """Elementwise product with broadcasting."""
    a, b = constant(a), constant(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                         _unbroadcast(g * a.value, b.shape)))


def op_scale(a, c: float) -> Node:
    a = constant(a)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def op_transpose(a) -> Node:
    a = constant(a)
    return _make(a.value.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))


def op_reshape(a, shape: tuple) -> Node:
    a = constant(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def op_relu(a) -> Node:
    a = constant(a)
    mask = a.value > 0
    # np.maximum keeps NaN so divergence is not masked
    return _make(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def op_leaky_relu(a, tau: float = LEAKY_SLOPE) -> Node:
    a = constant(a)
    slope = np.where(a.value > 0, 1.0, tau)
    return _make(a.value * slope, (a,), lambda g: (g * slope,))


def op_sigmoid(a) -> Node:
    a = constant(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def op_softplus(a) -> Node:
    a = constant(a)
    x = a.value
    out = np.logaddexp(0.0, x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * s,))


def op_exp(a) -> Node:
    a = constant(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def op_cos(a) -> Node:
    a = constant(a)
    return _make(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def op_softmax_rows(a) -> Node:
    a = constant(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _make(s, (a,), rule)


def op_log_softmax_rows(a) -> Node:
    a = constant(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def op_layernorm_rows(a, eps: float = LAYERNORM_EPS) -> Node:
    """Normalize each row to zero mean and unit variance (no affine part)."""
    a = constant(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _make(xhat, (a,), rule)


def op_mean_rows(a) -> Node:
    """Average over rows: ``(..., n, c) -> (..., 1, c)``."""
    a = constant(a)
    n = a.shape[-2]
    return _make(a.value.mean(axis=-2, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def op_sum(a) -> Node:
    """Sum of every entry, as a 1x1 node."""
    a = constant(a)
    return _make(np.array([[a.value.sum()]]), (a,),
                 lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def op_concat_cols(nodes: Sequence) -> Node:
    nodes = [constant(n) for n in nodes]
    lead = [n.shape[:-1] for n in nodes]
    shape = np.broadcast_shapes(*lead)
    values = [np.broadcast_to(n.value, shape + n.shape[-1:]) for n in nodes]
    out = np.concatenate(values, axis=-1)
    splits = np.cumsum([n.shape[-1] for n in nodes])[:-1]

    def rule(g):
        parts = np.split(g, splits, axis=-1)
        return tuple(_unbroadcast(p, n.shape) for p, n in zip(parts, nodes))
    return _make(out, nodes, rule)


def op_slice_cols(a, start: int, stop: int) -> Node:
    a = constant(a)

    def rule(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)
    return _make(a.value[..., start:stop], (a,), rule)


def _cond_ok(a: np.ndarray, inv: np.ndarray, rtol: float) -> np.ndarray:
    """Per-slice check that the 1-norm condition number stays below 1/rtol."""
    na = np.abs(a).sum(axis=-2).max(axis=-1)
    ni = np.abs(inv).sum(axis=-2).max(axis=-1)
    return np.isfinite(ni) & (na * ni * rtol < 1.0)


def _batched_inverse(m: np.ndarray, rtol: float) -> tuple[np.ndarray, bool]:
    """Inverse of each square slice, with a clamped pseudoinverse fallback.

    Also reports whether every slice was well conditioned.
    """
    try:
        with np.errstate(all="ignore"):
            inv = np.linalg.inv(m)
        ok = _cond_ok(m, inv, rtol)
    except np.linalg.LinAlgError:
        inv = np.empty_like(m)
        ok = np.zeros(m.shape[:-2], dtype=bool)
    if np.all(ok):
        return inv, True
    flat, flat_inv, flat_ok = m.reshape((-1,) + m.shape[-2:]), inv.reshape((-1,) + m.shape[-2:]), ok.reshape(-1)
    for i in np.flatnonzero(~flat_ok):
        flat_inv[i] = pinv(flat[i], rtol)
    return flat_inv.reshape(m.shape), False


def op_inverse(a, rtol: float = DEFAULT_RTOL) -> Node:
    """Matrix inverse with gradient ``-A⁻ᵀ G A⁻ᵀ``.

    Singular slices use the pseudoinverse and the same rule evaluated at it.
    """
    a = constant(a)
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"inverse needs square matrices, got {a.shape}")
    inv, _ = _batched_inverse(a.value, rtol)
    inv_t = inv.swapaxes(-1, -2)
    return _make(inv, (a,), lambda g: (-(inv_t @ g @ inv_t),))


def op_solve(a, b, rtol: float = DEFAULT_RTOL) -> Node:
    """``A⁻¹B`` without forming the inverse on the fast path."""
    a, b = constant(a), constant(b)
    if a.shape[-1] != a.shape[-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot solve {a.shape} against {b.shape}")
    inv, regular = _batched_inverse(a.value, rtol)
    if regular:
        # well conditioned everywhere: a direct solve is more accurate than inv @ b
        x = np.linalg.solve(a.value, b.value) if a.value.ndim == b.value.ndim else inv @ b.value
        inv = None
    else:
        x = inv @ b.value

    def rule(g):
        if inv is None:
            gb = np.linalg.solve(a.value.swapaxes(-1, -2), g)
        else:
            gb = inv.swapaxes(-1, -2) @ g
        ga = -gb @ x.swapaxes(-1, -2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(x, (a, b), rule)


def op_eye_like(n: int) -> Node:
    return constant(np.eye(n))


# -- losses -----------------------------------------------------------------

def loss_mse(pred: Node, target) -> Node:
    pred = constant(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        try:
            target = np.broadcast_to(target.reshape(pred.shape), pred.shape)
        except ValueError as exc:
            raise DimensionError(f"target shape {target.shape} vs prediction {pred.shape}") from exc
    diff = pred.value - target
    n = diff.size
    return _make(np.array([[np.mean(diff ** 2)]]), (pred,),
                 lambda g: (g.reshape(()) * 2.0 * diff / n,))


def loss_softmax_xent(logits: Node, labels: Iterable[int]) -> Node:
    """Mean cross-entropy; ``logits`` is ``(n, classes)`` or ``(n, 1, classes)``."""
    logits = constant(logits)
    z = logits.value.reshape(-1, logits.shape[-1])
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {z.shape[0]} rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ContractError("label out of range")
    zc = z - z.max(axis=1, keepdims=True)
    logp = zc - np.log(np.exp(zc).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g.reshape(()) * p / z.shape[0]).reshape(logits.shape),)
    return _make(np.array([[loss]]), (logits,), rule)


# -- backward ---------------------------------------------------------------

def _reachable(loss: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever the leaves already hold; call
    :func:`zero_grad` between steps. Intermediate nodes get fresh buffers.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _reachable(loss)
    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in order:
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node.backward_rule is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(params: dict[str, Node], path) -> None:
    obj = {name: matrix_to_json(p.value) for name, p in params.items()}
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_checkpoint(params: dict[str, Node], path) -> None:
    with open(path) as fh:
        obj = json.load(fh)
    missing = set(params) - set(obj)
    extra = set(obj) - set(params)
    if missing or extra:
        raise ContractError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        value = matrix_from_json(obj[name])
        if value.shape != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {value.shape} vs {p.shape}")
        p.value = value


# -- finite differences -----------------------------------------------------

def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g
