"""Dense float32 tensors with a define-by-run reverse-mode tape.

Operations record onto the innermost active :class:`Tape` whenever at least
one input requires a gradient.  Outside a tape (or with only constant inputs)
they are plain numpy computations, which is how frozen teachers run.
"""
from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a library op produces NaN or Inf."""


# ---------------------------------------------------------------------------
# allocation tracking (CPU analogue of peak device memory)
# ---------------------------------------------------------------------------

class AllocationStats:
    def __init__(self):
        self.live = 0
        self.peak = 0
        self.count = 0

    def _alloc(self, nbytes):
        self.live += nbytes
        self.count += 1
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, nbytes):
        self.live -= nbytes


_trackers: list[AllocationStats] = []


@contextlib.contextmanager
def track_allocations():
    """Record the high-water mark of live tensor bytes inside the block."""
    stats = AllocationStats()
    _trackers.append(stats)
    try:
        yield stats
    finally:
        _trackers.remove(stats)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, *, _check=True):
        arr = np.asarray(data, dtype=DTYPE)
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None
        if _trackers:
            nbytes = arr.nbytes
            for t in _trackers:
                t._alloc(nbytes)
            weakref.finalize(self, _release, list(_trackers), nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, _check=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _release(trackers, nbytes):
    for t in trackers:
        t._free(nbytes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


@dataclass
class ParamGroup:
    """A named parameter tensor plus its trainability flag."""

    name: str
    tensor: Tensor
    trainable: bool = False

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    def freeze(self):
        self.trainable = False
        self.tensor.requires_grad = False

    def unfreeze(self):
        self.trainable = True
        self.tensor.requires_grad = True

    @property
    def numel(self):
        return self.tensor.size


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    parents: tuple
    backward: Callable | None  # upstream grad -> tuple of parent grads
    grad: np.ndarray | None = None
    leaf: Tensor | None = None


_tapes: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def node_of(self, t: Tensor):
        """Node id of ``t`` on this tape, registering a leaf if needed."""
        if t._tape is self:
            return t._node
        if not t.requires_grad:
            return None
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = len(self.nodes)
            self.nodes.append(Node("leaf", (), None, leaf=t))
        return self._leaf_ids[key]

    def record(self, op, inputs, out: Tensor, backward):
        parents = tuple(self.node_of(t) for t in inputs)
        if all(p is None for p in parents):
            return out
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(Node(op, parents, backward))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns grads keyed by leaf tensor."""
        if loss._tape is not self:
            raise ValueError("loss node is not on this tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        for n in self.nodes:
            n.grad = None
        self.nodes[loss._node].grad = np.ones(loss.shape, dtype=DTYPE)
        grads = {}
        for idx in range(loss._node, -1, -1):
            n = self.nodes[idx]
            if n.grad is None:
                continue
            if n.leaf is not None:
                grads[n.leaf] = n.grad
                continue
            parent_grads = n.backward(n.grad)
            for pid, g in zip(n.parents, parent_grads):
                if pid is None or g is None:
                    continue
                p = self.nodes[pid]
                g = np.asarray(g, dtype=DTYPE)
                p.grad = g.copy() if p.grad is None else p.grad + g
        return grads


def backward(tape: Tape, loss: Tensor, groups: Iterable[ParamGroup] = ()):
    """Run the reverse sweep and map gradients onto named parameter groups.

    Groups that received no gradient (frozen or unused) are omitted.
    """
    grads = tape.backward(loss)
    out = {}
    for g in groups:
        if g.tensor in grads:
            out[g.name] = grads[g.tensor]
    return out


def active_tape():
    return _tapes[-1] if _tapes else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def _finish(op, inputs, value, backward_fn):
    value = np.asarray(value, dtype=DTYPE)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(value, _check=False)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        tape.record(op, inputs, out, backward_fn)
        out.requires_grad = True
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _finish("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _finish("exp", (x,), out, lambda g: (g * out,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _finish("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _finish("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _finish("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    c = np.float32(np.sqrt(2.0 / np.pi))
    inner = c * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _finish("gelu", (x,), out, bw)


def elu_plus_one(x):
    """x + 1 for x >= 0, exp(x) otherwise; strictly positive."""
    x = as_tensor(x)
    pos = x.data >= 0
    ex = np.exp(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data + 1.0, ex)
    return _finish("elu_plus_one", (x,), out, lambda g: (g * np.where(pos, 1.0, ex),))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None):
    """``x @ wᵀ (+ b)`` with ``w`` stored ``d_out×d_in``.

    Backward is exactly ``(g·w, gᵀ·x, colsum g)``, without the layout
    round trip a separate transpose would add.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: {x.shape} with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:
        return _finish("linear", (x, w), out, lambda g: (g @ wd, g.T @ xd))
    b = as_tensor(b)
    return _finish("linear", (x, w, b), out + b.data, lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _finish("transpose", (x,), np.ascontiguousarray(x.data.T),
                   lambda g: (np.ascontiguousarray(g.T),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _finish("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def slice_rows(x, start, stop):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _finish("slice_rows", (x,), x.data[start:stop], bw)


def concat_rows(parts: Sequence[Tensor]):
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _finish("concat_rows", tuple(parts), np.concatenate([p.data for p in parts], axis=0),
                   lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _finish("sum_all", (x,), np.sum(x.data, dtype=DTYPE),
                   lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def mean(x):
    x = as_tensor(x)
    return mul(sum_all(x), 1.0 / x.size)


def sum_rows(x):
    """Sum over the last axis, keeping it (N×d -> N×1)."""
    x = as_tensor(x)
    shape = x.shape
    return _finish("sum_rows", (x,), x.data.sum(axis=-1, keepdims=True),
                   lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def max_rows(x):
    """Row maximum (N×d -> N×1); gradient routed to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=-1)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(full, idx[..., None], g, axis=-1)
        return (full,)

    return _finish("max_rows", (x,), out, bw)


def mse(a, b):
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = np.mean(diff.astype(np.float64) ** 2)
    return _finish("mse", (a, b), val,
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


# ---------------------------------------------------------------------------
# composite / fused
# ---------------------------------------------------------------------------

def softmax_rows(s, mask=None):
    """Row softmax; masked-out entries get exactly zero weight.

    ``mask`` is a boolean array of the same shape, True = keep.
    """
    s = as_tensor(s)
    z = s.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError("mask shape mismatch")
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax_rows: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _finish("softmax_rows", (s,), p, bw)


def layer_norm(x, weight, bias, eps=1e-5):
    """LayerNorm over the last axis with affine parameters."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wd = weight.data
    n = xd.shape[-1]

    def bw(g):
        gx_hat = g * wd
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        gw = _unbroadcast(g * xhat, wd.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gw, gb

    return _finish("layer_norm", (x, weight, bias), xhat * wd + bias.data, bw)


def straight_through(x, value):
    """Forward returns ``value``; backward passes the gradient to ``x`` unchanged.

    Equivalent to ``x + stopgrad(value - x)`` but with the forward value
    exact instead of subject to the add/sub float rounding.
    """
    x = as_tensor(x)
    value = np.asarray(value, dtype=DTYPE)
    if value.shape != x.shape:
        raise ValueError("straight_through value shape mismatch")
    return _finish("straight_through", (x,), value, lambda g: (g,))


def stopgrad(x):
    return as_tensor(x).detach()
