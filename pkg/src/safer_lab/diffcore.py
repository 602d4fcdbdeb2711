"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records every operation eagerly: values are computed when
:meth:`Graph.apply` is called and the node is appended to the tape.
:meth:`Graph.backward` walks the tape in reverse and accumulates
gradients into the ``requires_grad`` leaves.

Only the operations the unlearning losses need are provided. Broadcasting
is limited to adding a bias row vector to every row of a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

OPS = (
    "leaf",
    "matmul",
    "add",
    "sub",
    "mul_elementwise",
    "scalar_mul",
    "relu",
    "tanh",
    "exp",
    "log",
    "mean",
    "sum",
    "l2_norm",
    "concat",
    "softmax_logsumexp_ce",
    "square",
)


class ShapeError(ValueError):
    """Input shapes are incompatible with the requested operation."""

    def __init__(self, op: str, shapes: list[tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


@dataclass
class Tensor:
    values: np.ndarray
    requires_grad: bool = False
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    out: Tensor
    attrs: dict = field(default_factory=dict)


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _ce_targets(logits: np.ndarray, target) -> np.ndarray:
    """Return an (n, K) target distribution from int labels or soft rows."""
    n, k = logits.shape
    t = np.asarray(target)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if t.shape[0] != n:
            raise ShapeError("softmax_logsumexp_ce", [logits.shape, t.shape])
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ShapeError("softmax_logsumexp_ce", [logits.shape, t.shape], "label out of range")
        q = np.zeros((n, k))
        q[np.arange(n), t] = 1.0
        return q
    q = np.asarray(target, dtype=np.float64)
    if q.shape != logits.shape:
        raise ShapeError("softmax_logsumexp_ce", [logits.shape, q.shape])
    return q


class Graph:
    """An append-only tape of operation records.

    Node ids are indices into :attr:`nodes`; every input id of node ``k``
    is smaller than ``k`` so insertion order is a topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].out.values

    def tensor(self, nid: int) -> Tensor:
        return self.nodes[nid].out

    def leaf(self, values, requires_grad: bool = False) -> int:
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad)
        self.nodes.append(Node("leaf", (), t))
        return len(self.nodes) - 1

    def constant(self, values) -> int:
        return self.leaf(values, requires_grad=False)

    def apply(self, op: str, inputs, attrs: dict | None = None) -> int:
        if op not in _FORWARD:
            raise ValueError(f"unknown op {op!r}")
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise IndexError(f"{op}: input id {i} not in graph")
        attrs = dict(attrs or {})
        vals = [self.nodes[i].out.values for i in inputs]
        out = _FORWARD[op](vals, attrs)
        self.nodes.append(Node(op, inputs, Tensor(out), attrs))
        return len(self.nodes) - 1

    # thin wrappers so model code reads naturally
    def matmul(self, a: int, b: int) -> int:
        return self.apply("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self.apply("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self.apply("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.apply("mul_elementwise", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self.apply("scalar_mul", (a,), {"c": float(c)})

    def relu(self, a: int) -> int:
        return self.apply("relu", (a,))

    def tanh(self, a: int) -> int:
        return self.apply("tanh", (a,))

    def exp(self, a: int) -> int:
        return self.apply("exp", (a,))

    def log(self, a: int) -> int:
        return self.apply("log", (a,))

    def square(self, a: int) -> int:
        return self.apply("square", (a,))

    def mean(self, a: int, axis: int | None = None) -> int:
        return self.apply("mean", (a,), {"axis": axis})

    def sum(self, a: int, axis: int | None = None) -> int:
        return self.apply("sum", (a,), {"axis": axis})

    def l2_norm(self, a: int, axis: int | None = None) -> int:
        return self.apply("l2_norm", (a,), {"axis": axis})

    def concat(self, ids, axis: int = 1) -> int:
        return self.apply("concat", tuple(ids), {"axis": axis})

    def cross_entropy(self, logits: int, target) -> int:
        """Mean softmax cross-entropy; ``target`` is int labels or soft rows."""
        return self.apply("softmax_logsumexp_ce", (logits,), {"target": target})

    def backward(self, output: int) -> dict[int, np.ndarray]:
        """Back-propagate from a scalar node.

        Leaf accumulators are reset first, so repeated calls do not stack.
        Returns the gradient of every leaf with ``requires_grad`` set.
        """
        out = self.nodes[output].out
        if out.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
        for node in self.nodes:
            if node.op == "leaf" and node.out.requires_grad:
                node.out.grad = np.zeros_like(node.out.values)

        grads: dict[int, np.ndarray] = {output: np.ones_like(out.values)}
        for nid in range(output, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                if node.out.requires_grad:
                    node.out.grad += g
                continue
            vals = [self.nodes[i].out.values for i in node.inputs]
            for i, gi in zip(node.inputs, _BACKWARD[node.op](g, vals, node.out.values, node.attrs)):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {
            i: n.out.grad
            for i, n in enumerate(self.nodes)
            if n.op == "leaf" and n.out.requires_grad
        }


# ---------------------------------------------------------------------------
# forward rules


def _fw_matmul(v, a):
    x, w = v
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("matmul", [x.shape, w.shape])
    return x @ w


def _same_or_bias(op, x, y):
    if x.shape == y.shape:
        return
    if x.ndim == 2 and y.ndim == 1 and x.shape[1] == y.shape[0]:
        return
    raise ShapeError(op, [x.shape, y.shape], "only equal shapes or row-wise bias")


def _fw_add(v, a):
    _same_or_bias("add", *v)
    return v[0] + v[1]


def _fw_sub(v, a):
    _same_or_bias("sub", *v)
    return v[0] - v[1]


def _fw_mul(v, a):
    if v[0].shape != v[1].shape:
        raise ShapeError("mul_elementwise", [v[0].shape, v[1].shape])
    return v[0] * v[1]


def _fw_log(v, a):
    x = v[0]
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min():.6g})")
    return np.log(x)


def _fw_reduce(fn):
    def fw(v, a):
        axis = a.get("axis")
        x = v[0]
        if axis is not None and not -x.ndim <= axis < x.ndim:
            raise ShapeError("reduce", [x.shape], f"axis {axis}")
        return np.asarray(fn(x, axis=axis))

    return fw


def _fw_l2(v, a):
    axis = a.get("axis")
    x = v[0]
    return np.asarray(np.sqrt((x * x).sum(axis=axis)))


def _fw_concat(v, a):
    axis = a.get("axis", 1)
    try:
        return np.concatenate(v, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", [x.shape for x in v], str(exc)) from None


def _fw_ce(v, a):
    z = v[0]
    if z.ndim != 2:
        raise ShapeError("softmax_logsumexp_ce", [z.shape], "logits must be (n, K)")
    q = _ce_targets(z, a["target"])
    a["_q"] = q
    lse = _logsumexp_rows(z)
    return np.asarray(np.mean(lse - (q * z).sum(axis=1)))


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "sub": _fw_sub,
    "mul_elementwise": _fw_mul,
    "scalar_mul": lambda v, a: a["c"] * v[0],
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "tanh": lambda v, a: np.tanh(v[0]),
    "exp": lambda v, a: np.exp(v[0]),
    "log": _fw_log,
    "mean": _fw_reduce(np.mean),
    "sum": _fw_reduce(np.sum),
    "l2_norm": _fw_l2,
    "concat": _fw_concat,
    "softmax_logsumexp_ce": _fw_ce,
    "square": lambda v, a: v[0] * v[0],
}


# ---------------------------------------------------------------------------
# backward rules: (upstream grad, input values, output value, attrs) -> input grads


def _unbias(g, shape):
    return g.sum(axis=0) if g.shape != shape else g


def _bw_reduce_expand(g, x, axis):
    if axis is None:
        return np.broadcast_to(g, x.shape)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape)


def _bw_mean(g, v, out, a):
    x = v[0]
    axis = a.get("axis")
    n = x.size if axis is None else x.shape[axis]
    return (_bw_reduce_expand(g, x, axis) / n,)


def _bw_l2(g, v, out, a):
    x = v[0]
    axis = a.get("axis")
    norm = out if axis is None else np.expand_dims(out, axis)
    safe = np.where(norm > 0, norm, 1.0)
    # subgradient 0 at the origin
    direction = np.where(norm > 0, x / safe, 0.0)
    return (_bw_reduce_expand(g, x, axis) * direction,)


def _bw_concat(g, v, out, a):
    axis = a.get("axis", 1)
    cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _bw_ce(g, v, out, a):
    z = v[0]
    q = a["_q"]
    return (g * (softmax(z) - q) / z.shape[0],)


_BACKWARD: dict[str, Callable] = {
    "matmul": lambda g, v, o, a: (g @ v[1].T, v[0].T @ g),
    "add": lambda g, v, o, a: (g, _unbias(g, v[1].shape)),
    "sub": lambda g, v, o, a: (g, -_unbias(g, v[1].shape)),
    "mul_elementwise": lambda g, v, o, a: (g * v[1], g * v[0]),
    "scalar_mul": lambda g, v, o, a: (a["c"] * g,),
    "relu": lambda g, v, o, a: (g * (v[0] > 0),),
    "tanh": lambda g, v, o, a: (g * (1.0 - o * o),),
    "exp": lambda g, v, o, a: (g * o,),
    "log": lambda g, v, o, a: (g / v[0],),
    "mean": _bw_mean,
    "sum": lambda g, v, o, a: (_bw_reduce_expand(g, v[0], a.get("axis")),),
    "l2_norm": _bw_l2,
    "concat": _bw_concat,
    "softmax_logsumexp_ce": _bw_ce,
    "square": lambda g, v, o, a: (2.0 * g * v[0],),
}


def finite_difference_check(
    fn: Callable[[np.ndarray], float],
    point,
    analytic,
    eps: float = 1e-5,
) -> float:
    """Compare an analytic gradient of ``fn`` at ``point`` with central differences.

    ``fn`` must be deterministic in its argument; noise draws are supplied
    by the caller, never sampled inside. Returns the maximum over
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.size != x.size:
        raise ShapeError("finite_difference_check", [x.shape, analytic.shape])
    if not np.isfinite(fn(x.copy())):
        raise DomainError("function value is not finite")
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = fn(xp.reshape(x.shape))
        fm = fn(xm.reshape(x.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"function value not finite near coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return float(worst)
