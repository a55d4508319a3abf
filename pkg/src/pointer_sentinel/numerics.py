"""Dense arrays with a dynamically recorded reverse-mode tape.

Every op returns a :class:`DiffValue` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Graphs are rebuilt
on every forward pass, so a pointer window whose length changes from step to
step needs no special handling.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

Rng = np.random.Generator

_GRAD_ENABLED = True
_SEQ = itertools.count()


def make_rng(seed: int) -> Rng:
    """PCG64 generator; same seed and call sequence give the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (evaluation / analysis)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class DiffValue:
    __slots__ = ("data", "_grad", "parents", "backward_rule", "requires_grad", "name", "seq")

    def __init__(self, data, parents: Sequence["DiffValue"] = (), backward_rule=None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self._grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name
        # creation order is a valid topological order of the tape
        self.seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype).reshape(self.data.shape)

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"DiffValue{label}(shape={self.data.shape})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(data, name: str | None = None) -> DiffValue:
    return DiffValue(np.array(data, copy=True), requires_grad=True, name=name)


def constant(data) -> DiffValue:
    return data if isinstance(data, DiffValue) else DiffValue(data)


def _lift(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(np.asarray(x))


def _node(data, parents, rule) -> DiffValue:
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                return DiffValue(data, parents, rule, requires_grad=True)
    return DiffValue(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(x) -> DiffValue:
    x = _lift(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> DiffValue:
    x = _lift(x)
    # tanh form never overflows
    y = np.tanh(x.data * 0.5)
    y *= 0.5
    y += 0.5
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid}


def elementwise(f: str, x) -> DiffValue:
    try:
        return _ELEMENTWISE[f](x)
    except KeyError:
        raise ValueError(f"unknown elementwise function {f!r}") from None


def blend(a, b, weight) -> DiffValue:
    """weight * a + (1 - weight) * b with a constant ``weight`` (scalar or array)."""
    a, b = _lift(a), _lift(b)
    w = np.asarray(weight, dtype=np.result_type(a.data, b.data))
    wb = 1.0 - w
    sa, sb = a.data.shape, b.data.shape
    return _node(w * a.data + wb * b.data, (a, b),
                 lambda g: (_unbroadcast(g * w, sa), _unbroadcast(g * wb, sb)))


def log(x) -> DiffValue:
    x = _lift(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x, floor: float) -> DiffValue:
    """max(x, floor); clamped entries pass no gradient."""
    x = _lift(x)
    keep = x.data > floor
    return _node(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.data.shape} by {b.data.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w) -> DiffValue:
    """x @ w.T for x of shape [..., k] and w of shape [n, k]."""
    x, w = _lift(x), _lift(w)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} does not match weight {w.data.shape}")
    xd, wd = x.data, w.data

    def rule(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return _node(xd @ wd.T, (x, w), rule)


def inner(q, h) -> DiffValue:
    """Dot product over the last axis, broadcasting the leading axes."""
    q, h = _lift(q), _lift(h)
    if q.data.shape[-1:] != h.data.shape[-1:]:
        raise ShapeError(f"inner: length mismatch {q.data.shape} vs {h.data.shape}")
    qd, hd = q.data, h.data
    out = np.sum(qd * hd, axis=-1)
    if out.ndim == 0:
        out = out.reshape(1)

    def rule(g):
        ge = g[0] if out.shape == (1,) and qd.ndim == hd.ndim == 1 else g[..., None]
        return _unbroadcast(ge * hd, qd.shape), _unbroadcast(ge * qd, hd.shape)

    return _node(out, (q, h), rule)


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None) -> DiffValue:
    x = _lift(x)
    shape = x.data.shape
    out = x.data.sum(axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (x,), rule)


def mean(x) -> DiffValue:
    x = _lift(x)
    n = x.data.size
    shape = x.data.shape
    return _node(x.data.mean(), (x,), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


def getitem(x, index) -> DiffValue:
    x = _lift(x)
    shape, dtype = x.data.shape, x.data.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in parts)

    def rule(g):
        if basic:
            return (_SliceGrad(index, g, shape, dtype),)
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), rule)


def stack(items: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    items = [_lift(v) for v in items]
    out = np.stack([v.data for v in items], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _node(out, items, rule)


def concat_scalar(z, t) -> DiffValue:
    """Append ``t`` (one value per leading index) as the last element of ``z``."""
    z, t = _lift(z), _lift(t)
    lead = z.data.shape[:-1]
    if t.data.shape not in (lead, lead + (1,)) and not (not lead and t.data.size == 1):
        raise ShapeError(f"concat_scalar: {t.data.shape} is not scalar per row of {z.data.shape}")
    tshape = t.data.shape
    tcol = t.data.reshape(lead + (1,))
    out = np.concatenate([z.data.astype(np.result_type(z.data, tcol)), tcol], axis=-1)
    return _node(out, (z, t), lambda g: (g[..., :-1], g[..., -1:].reshape(tshape)))


def take_last(x, index: np.ndarray) -> DiffValue:
    """x[b, index[b]] for a [B, n] array (gather along the last axis)."""
    x = _lift(x)
    rows = np.arange(x.data.shape[0])
    shape, dtype = x.data.shape, x.data.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        full[rows, index] = g
        return (full,)

    return _node(x.data[rows, index], (x,), rule)


def embed(table, ids: np.ndarray) -> DiffValue:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    table = _lift(table)
    shape, dtype = table.data.shape, table.data.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), rule)


def scatter_sum(a, index: np.ndarray, size: int) -> DiffValue:
    """out[b, w] = sum of a[b, i] over i with index[b, i] == w."""
    a = _lift(a)
    bsz, n = a.data.shape
    out = np.zeros((bsz, size), dtype=a.data.dtype)
    rows = np.repeat(np.arange(bsz), n)
    np.add.at(out, (rows, index.reshape(-1)), a.data.reshape(-1))
    return _node(out, (a,), lambda g: (g[rows, index.reshape(-1)].reshape(bsz, n),))


# ---------------------------------------------------------------- softmax

def softmax(z) -> DiffValue:
    """Softmax over the last axis with max subtraction."""
    z = _lift(z)
    if z.data.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (z,), rule)


# ---------------------------------------------------------------- backward

def _topo_order(root: DiffValue) -> list[DiffValue]:
    seen = {id(root): root}
    todo = [root]
    while todo:
        node = todo.pop()
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                todo.append(p)
    return sorted(seen.values(), key=lambda n: n.seq)


class _SliceGrad:
    """Gradient that is zero outside ``array[index]``; avoids full-size temporaries."""
    __slots__ = ("index", "value", "shape", "dtype")

    def __init__(self, index, value, shape, dtype):
        self.index, self.value, self.shape, self.dtype = index, value, shape, dtype

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape, dtype=self.dtype)
        full[self.index] = self.value
        return full


def backward(root: DiffValue) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every node reachable from ``root``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    # id -> [array, owned]; owned arrays were allocated here and may be updated in place
    pending = {id(root): [np.ones_like(root.data), True]}
    for node in reversed(_topo_order(root)):
        entry = pending.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        node._grad = g if node._grad is None else node._grad + g
        if node.backward_rule is None:
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            if isinstance(pg, _SliceGrad):
                if prev is None:
                    pending[key] = [pg.dense(), True]
                else:
                    if not prev[1]:
                        prev[0], prev[1] = prev[0].copy(), True
                    prev[0][pg.index] += pg.value
            elif prev is None:
                pending[key] = [pg, False]
            elif prev[1]:
                prev[0] += pg
            else:
                pending[key] = [prev[0] + pg, True]


# ---------------------------------------------------------------- optimizer

def global_grad_norm(params: Iterable[tuple[str, DiffValue]]) -> float:
    total = 0.0
    for _, p in params:
        if p._grad is not None:
            total += float(np.sum(p._grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_and_step(params, lr: float, max_norm: float) -> float:
    """Joint-norm gradient clipping followed by one SGD update; zeroes grads.

    ``params`` is a :class:`ModelParams`-like object exposing ``named()`` or an
    iterable of ``(name, DiffValue)`` pairs.  Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    named = list(params.named() if hasattr(params, "named") else params)
    for name, p in named:
        if p._grad is not None and not np.all(np.isfinite(p._grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    norm = global_grad_norm(named)
    scale = max_norm / norm if norm > max_norm else 1.0
    for _, p in named:
        if p._grad is not None:
            p.data -= (lr * scale) * p._grad
        p._grad = None
    return norm


def finite_difference_grad(f: Callable[[], float], x: DiffValue, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data`` (perturbed in place)."""
    if not x.data.flags.c_contiguous:
        raise ValueError("finite differences need a contiguous array")
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out
