"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Tensors are always (rows, cols); batches are row-stacked. A Graph records
every op on a tape and backpropagates in exact reverse construction order,
so replaying a seeded graph is bit-reproducible. Dropout masks are keyed by
(graph seed, node id of the input), which makes them a pure function of the
graph structure rather than of call order.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "Graph",
    "Tensor",
    "add",
    "concat_cols",
    "dropout",
    "layer_norm_rows",
    "linear_rows",
    "log_softmax_np",
    "log_softmax_rows",
    "matmul",
    "mul",
    "multi_head_attention",
    "relu",
    "scale",
    "slice_cols",
    "softmax_rows",
    "softsign",
    "sum_all",
    "take_rows",
    "transpose",
]

_SEED_MASK = (1 << 63) - 1


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or supplied."""


class ContractError(ValueError):
    """An operation was invoked outside its contract."""


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a plain array, stable for large magnitudes."""
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class Tensor:
    """One node of a computation graph: a (rows, cols) value plus a grad slot."""

    __slots__ = ("data", "grad", "node_id", "name", "graph", "_parents", "_push")

    def __init__(self, data, node_id, graph, name=None, parents=(), push=None):
        self.data = data
        self.grad = None
        self.node_id = node_id
        self.name = name
        self.graph = graph
        self._parents = parents
        self._push = push

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        tag = self.name if self.name is not None else self.node_id
        return f"Tensor({tag}, shape={self.data.shape})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    # copy on first write: g may alias the child's grad buffer
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


class Graph:
    """Single-owner op tape.

    ``seed`` drives dropout masks; ``training`` toggles dropout on. Node ids
    are (scope, ordinal) pairs: scopes let callers give independent subgraphs
    (one per batch element) ids that do not depend on processing order.
    """

    def __init__(self, seed: int = 0, training: bool = False):
        self.seed = int(seed) & _SEED_MASK
        self.training = bool(training)
        self.nodes: list[Tensor] = []
        self._scope = 0
        self._counters: dict[int, int] = {}
        self._names: set[str] = set()

    @contextmanager
    def scope(self, scope_id: int):
        prev = self._scope
        self._scope = int(scope_id)
        try:
            yield self
        finally:
            self._scope = prev

    @property
    def current_scope(self) -> int:
        return self._scope

    def _next_id(self) -> tuple[int, int]:
        n = self._counters.get(self._scope, 0)
        self._counters[self._scope] = n + 1
        return (self._scope, n)

    def op(self, kind: str, data: np.ndarray, parents: tuple, push) -> Tensor:
        # a non-finite entry always poisons the sum, so one reduce suffices
        if not math.isfinite(float(data.sum())):
            raise NumericError(f"non-finite values produced by {kind}")
        t = Tensor(data, self._next_id(), self, parents=parents, push=push)
        self.nodes.append(t)
        return t

    def leaf(self, values, name: str | None = None) -> Tensor:
        data = np.asarray(values, dtype=np.float64)
        if data.ndim != 2:
            raise ContractError(f"tensors are 2-D, got shape {data.shape}")
        if name is not None:
            if name in self._names:
                raise ContractError(f"duplicate leaf name {name!r}")
            self._names.add(name)
        if not np.isfinite(data).all():
            raise NumericError(f"non-finite values in leaf {name or '<const>'}")
        t = Tensor(data, self._next_id(), self, name=name)
        self.nodes.append(t)
        return t

    def constant(self, values) -> Tensor:
        return self.leaf(values, name=None)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate from a 1x1 loss; return gradients for named leaves.

        Leaves that the loss does not reach get an all-zero gradient.
        """
        if loss.graph is not self:
            raise ContractError("loss belongs to a different graph")
        if loss.data.shape != (1, 1):
            raise ContractError(f"loss must be 1x1, got shape {loss.data.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is not None and node._push is not None:
                node._push(node.grad)
        table: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.name is not None:
                table[node.name] = (
                    node.grad if node.grad is not None else np.zeros_like(node.data)
                )
        return table


def _graph_of(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ContractError("operands belong to different graphs")
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    g = _graph_of(a, b)

    def push(grad, a=a, b=b):
        _accum(a, grad @ b.data.T)
        _accum(b, a.data.T @ grad)

    return g.op("matmul", a.data @ b.data, (a, b), push)


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    # equal, one side scalar, or one side a (1, n) row vector
    if sa == sb:
        return sa
    if sa == (1, 1):
        return sb
    if sb == (1, 1):
        return sa
    if sa[0] == 1 and sa[1] == sb[1]:
        return sb
    if sb[0] == 1 and sb[1] == sa[1]:
        return sa
    raise DimensionError(f"elementwise shape mismatch: {sa} vs {sb}")


def _reduce_to(parent: Tensor, grad: np.ndarray) -> None:
    ps = parent.data.shape
    if grad.shape == ps:
        _accum(parent, grad)
    elif ps == (1, 1):
        _accum(parent, grad.sum().reshape(1, 1))
    else:  # (1, n) row broadcast over rows
        _accum(parent, grad.sum(axis=0, keepdims=True))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.data.shape, b.data.shape)
    g = _graph_of(a, b)

    def push(grad, a=a, b=b):
        _reduce_to(a, grad)
        _reduce_to(b, grad)

    return g.op("add", a.data + b.data, (a, b), push)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.data.shape, b.data.shape)
    g = _graph_of(a, b)

    def push(grad, a=a, b=b):
        _reduce_to(a, grad * b.data)
        _reduce_to(b, grad * a.data)

    return g.op("mul", a.data * b.data, (a, b), push)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def push(grad, x=x, c=c):
        _accum(x, grad * c)

    return x.graph.op("scale", x.data * c, (x,), push)


def relu(x: Tensor) -> Tensor:
    def push(grad, x=x):
        _accum(x, grad * (x.data > 0))

    return x.graph.op("relu", np.maximum(x.data, 0.0), (x,), push)


def softsign(x: Tensor) -> Tensor:
    denom = 1.0 + np.abs(x.data)

    def push(grad, x=x, denom=denom):
        _accum(x, grad / (denom * denom))

    return x.graph.op("softsign", x.data / denom, (x,), push)


def dropout(x: Tensor, p: float) -> Tensor:
    """Inverted dropout, deterministic in (graph seed, node id of ``x``).

    Identity (no node added) when the graph is not in training mode.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    g = x.graph
    if not g.training or p == 0.0:
        return x
    scope, ordinal = x.node_id
    rng = np.random.default_rng([g.seed, scope & _SEED_MASK, ordinal])
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def push(grad, x=x, keep=keep):
        _accum(x, grad * keep)

    return g.op("dropout", x.data * keep, (x,), push)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ContractError("log_softmax_rows on empty tensor")
    out = log_softmax_np(x.data)
    probs = np.exp(out)

    def push(grad, x=x, probs=probs):
        _accum(x, grad - probs * grad.sum(axis=1, keepdims=True))

    return x.graph.op("log_softmax_rows", out, (x,), push)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ContractError("softmax_rows on empty tensor")
    out = np.exp(log_softmax_np(x.data))

    def push(grad, x=x, out=out):
        _accum(x, out * (grad - (grad * out).sum(axis=1, keepdims=True)))

    return x.graph.op("softmax_rows", out, (x,), push)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.data.shape[1]
    if gain.data.shape != (1, d) or bias.data.shape != (1, d):
        raise DimensionError(
            f"layer_norm gain/bias must be (1, {d}), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    g = _graph_of(x, gain, bias)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def push(grad, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        _accum(gain, (grad * xhat).sum(axis=0, keepdims=True))
        _accum(bias, grad.sum(axis=0, keepdims=True))
        gx = grad * gain.data
        _accum(
            x,
            (
                gx
                - gx.mean(axis=1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            )
            * inv,
        )

    return g.op("layer_norm_rows", xhat * gain.data + bias.data, (x, gain, bias), push)


def sum_all(x: Tensor) -> Tensor:
    def push(grad, x=x):
        _accum(x, np.full_like(x.data, grad[0, 0]))

    return x.graph.op("sum_all", x.data.sum().reshape(1, 1), (x,), push)


def transpose(x: Tensor) -> Tensor:
    def push(grad, x=x):
        _accum(x, grad.T)

    return x.graph.op("transpose", x.data.T.copy(), (x,), push)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    cols = x.data.shape[1]
    if not 0 <= start < stop <= cols:
        raise DimensionError(f"column slice [{start}:{stop}] outside width {cols}")

    def push(grad, x=x, start=start, stop=stop):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, start:stop] += grad

    return x.graph.op("slice_cols", x.data[:, start:stop].copy(), (x,), push)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols of no tensors")
    g = _graph_of(*parts)
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise DimensionError("concat_cols requires equal row counts")
    widths = [p.data.shape[1] for p in parts]

    def push(grad, parts=tuple(parts), widths=tuple(widths)):
        j = 0
        for p, w in zip(parts, widths):
            _accum(p, grad[:, j : j + w])
            j += w

    return g.op("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), push)


def linear_rows(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map of row vectors: x @ w + b with b a (1, out) row."""
    if x.data.shape[1] != w.data.shape[0] or b.data.shape != (1, w.data.shape[1]):
        raise DimensionError(
            f"linear shapes disagree: x {x.data.shape}, w {w.data.shape}, "
            f"b {b.data.shape}"
        )
    g = _graph_of(x, w, b)

    def push(grad, x=x, w=w, b=b):
        _accum(x, grad @ w.data.T)
        _accum(w, x.data.T @ grad)
        _accum(b, grad.sum(axis=0, keepdims=True))

    return g.op("linear_rows", x.data @ w.data + b.data, (x, w, b), push)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``heads`` column blocks, fused into
    one node. ``mask`` is an additive constant (queries x keys), e.g. a causal
    mask; it receives no gradient."""
    d = q.data.shape[1]
    if d % heads != 0:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    if k.data.shape != v.data.shape or k.data.shape[1] != d:
        raise DimensionError(
            f"attention operands disagree: q {q.data.shape}, k {k.data.shape}, "
            f"v {v.data.shape}"
        )
    g = _graph_of(q, k, v)
    tq, tk = q.data.shape[0], k.data.shape[0]
    if mask is not None and mask.shape != (tq, tk):
        raise DimensionError(f"mask shape {mask.shape} != ({tq}, {tk})")
    dk = d // heads
    scl = 1.0 / math.sqrt(dk)
    qh = q.data.reshape(tq, heads, dk).transpose(1, 0, 2)
    kh = k.data.reshape(tk, heads, dk).transpose(1, 0, 2)
    vh = v.data.reshape(tk, heads, dk).transpose(1, 0, 2)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scl
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=2, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=2, keepdims=True)
    out = np.matmul(weights, vh).transpose(1, 0, 2).reshape(tq, d)

    def push(grad, q=q, k=k, v=v, qh=qh, kh=kh, vh=vh, weights=weights,
             heads=heads, dk=dk, scl=scl, tq=tq, tk=tk, d=d):
        gh = grad.reshape(tq, heads, dk).transpose(1, 0, 2)
        dweights = np.matmul(gh, vh.transpose(0, 2, 1))
        dv = np.matmul(weights.transpose(0, 2, 1), gh)
        dscores = weights * (dweights - (dweights * weights).sum(axis=2, keepdims=True))
        dq = np.matmul(dscores, kh) * scl
        dkh = np.matmul(dscores.transpose(0, 2, 1), qh) * scl
        _accum(q, dq.transpose(1, 0, 2).reshape(tq, d))
        _accum(k, dkh.transpose(1, 0, 2).reshape(tk, d))
        _accum(v, dv.transpose(1, 0, 2).reshape(tk, d))

    return g.op("multi_head_attention", out, (q, k, v), push)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("take_rows needs a nonempty 1-D id list")
    rows = table.data.shape[0]
    if idx.min() < 0 or idx.max() >= rows:
        raise DimensionError(f"row ids out of range [0, {rows})")

    def push(grad, table=table, idx=idx):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, grad)

    return table.graph.op("take_rows", table.data[idx].copy(), (table,), push)
