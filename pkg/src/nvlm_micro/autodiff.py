"""Dense f64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`; nothing that participates in a
graph is mutated in place.  When any input requires a gradient the result
records its parents and a closure mapping the upstream gradient to one
gradient per parent.  Node ids come from a global counter, so a parent always
has a smaller id than its child and sorting by id is a topological order.

Broadcasting is deliberately absent except for :func:`add_bias`, which adds a
1-D vector over the last axis.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An immutable f64 array that may take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, data) -> None:
        """Rebind a leaf to new values (optimizer steps, finite differences).

        The old buffer is left untouched, so graphs that captured it stay valid.
        """
        if not self.is_leaf:
            raise RuntimeError("only leaf tensors can be reassigned")
        arr = np.array(data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: shape {arr.shape} does not match {self.data.shape}")
        arr.setflags(write=False)
        self.data = arr

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """The ops reachable from one output, in insertion (topological) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.id in seen:
                continue
            seen[t.id] = t
            stack.extend(t._parents)
        return cls([seen[k] for k in sorted(seen)])

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf and t.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the leaves that received a gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    touched = []
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            touched.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return touched


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single element of ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale_by: scalar expected, got shape {s.shape}")
    sv = s.data.reshape(-1)[0]
    xd = x.data

    def bw(g):
        return g * sv, np.array(np.sum(g * xd)).reshape(s.shape)

    return _result(xd * sv, (x, s), bw, "scale_by")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if len(b.shape) != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _result(x.data + b.data, (x, b), bw, "add_bias")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError(f"add_const: shapes {x.shape} and {c.shape} differ")
    return _result(x.data + c, (x,), lambda g: (g,), "add_const")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _result(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, bw, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(len(p.shape) != 2 for p in parts):
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat_cols")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), bw, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), bw, "slice_cols")


def permute(x: Tensor, index: np.ndarray) -> Tensor:
    """Output element ``i`` (row-major) is ``x.flat[index.flat[i]]``.

    ``index`` must be a permutation of ``range(x.size)``; its shape becomes
    the output shape.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size != x.size:
        raise ShapeError(f"permute: index has {index.size} entries for {x.size} elements")
    shape = x.shape
    flat_idx = index.reshape(-1)

    def bw(g):
        full = np.zeros(x.size)
        full[flat_idx] = g.reshape(-1)
        return (full.reshape(shape),)

    return _result(x.data.reshape(-1)[flat_idx].reshape(index.shape), (x,), bw, "permute")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: row ``ids[i]`` of ``table`` becomes output row ``i``."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), bw, "take_rows")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def masked_softmax_rows(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the ``allowed`` entries of each row.

    Disallowed entries behave as -inf logits and come out exactly 0.  A row
    with no allowed entry is all zeros, so it contributes nothing downstream.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != x.shape:
        raise ShapeError(f"masked_softmax_rows: mask {allowed.shape} vs scores {x.shape}")
    z = np.where(allowed, x.data, -np.inf)
    rowmax = z.max(axis=-1, keepdims=True) if z.shape[-1] else np.zeros(z.shape[:-1] + (1,))
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(allowed, np.exp(np.where(allowed, x.data - rowmax, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    n_pos, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if tgt.shape != (n_pos,) or m.shape != (n_pos,):
        raise ShapeError(f"cross_entropy: {n_pos} positions but {tgt.shape} targets, {m.shape} mask")
    if not m.any():
        raise ValueError("empty loss mask")
    if (tgt[m] < 0).any() or (tgt[m] >= vocab).any():
        raise IndexError(f"cross_entropy: target id out of range for vocab {vocab}")
    rows = np.nonzero(m)[0]
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), tgt[rows]]
    count = rows.size

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), tgt[rows]] -= 1.0
        full = np.zeros((n_pos, vocab))
        full[rows] = p * (float(g) / count)
        return (full,)

    return _result(np.array(nll.mean()), (logits,), bw, "cross_entropy")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
