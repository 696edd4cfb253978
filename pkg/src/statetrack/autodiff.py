"""Reverse-mode differentiation on numpy arrays.

A :class:`Tape` records every op whose inputs need a gradient, in creation
order (a valid topological order). ``Tape.backward`` walks the record in
reverse and sums contributions into ``Tensor.grad``. Without an active tape
the ops only compute values, which is how inference runs.

Piecewise ops (relu and the pair selectors) can log their branch masks into a
:func:`branch_log`, which lets the finite-difference checker notice when a
probe step crossed a kink.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError

_TAPES: list["Tape"] = []
_BRANCH_LOGS: list[list[np.ndarray]] = []


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_backward", "_owned", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._owned = False
        self.name = name
        if requires_grad and _TAPES:
            _TAPES[-1].leaves.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)


class Tape:
    """Records differentiable ops while active (``with Tape() as tape:``)."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, root: Tensor) -> None:
        if root.value.size != 1:
            raise ValueError("backward needs a scalar root")
        if not np.isfinite(root.value).all():
            raise NumericError(f"non-finite loss {float(root.value)}")
        for t in self.nodes:
            t.grad = None
            t._owned = False
        for t in self.leaves:
            t.grad = None
            t._owned = False
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)


@contextlib.contextmanager
def branch_log():
    log: list[np.ndarray] = []
    _BRANCH_LOGS.append(log)
    try:
        yield log
    finally:
        _BRANCH_LOGS.remove(log)


def _log_branch(mask: np.ndarray) -> None:
    if _BRANCH_LOGS:
        _BRANCH_LOGS[-1].append(mask)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward) -> Tensor:
    if not _TAPES or not any(p.requires_grad for p in parents):
        return Tensor(value)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = True
    out._owned = False
    out.name = None
    out._backward = backward
    _TAPES[-1].nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._owned = False
    else:
        t.grad = t.grad + g
        t._owned = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(a.value * b.value, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * c, (a,), lambda g: _accum(a, g * c))


def exp(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(a.value)
    return _make(v, (a,), lambda g: _accum(a, g * v))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    v = np.tanh(a.value)
    return _make(v, (a,), lambda g: _accum(a, g * (1.0 - v * v)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = _sigmoid(a.value)
    return _make(v, (a,), lambda g: _accum(a, g * v * (1.0 - v)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    v = np.logaddexp(0.0, a.value)
    return _make(v, (a,), lambda g: _accum(a, g * _sigmoid(a.value)))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.value), (a,), lambda g: _accum(a, -g * np.sin(a.value)))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.value), (a,), lambda g: _accum(a, g * np.cos(a.value)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0.0  # relu'(0) = 0
    _log_branch(mask)
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: _accum(a, g * mask))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pair_select(a, larger_first: bool) -> Tensor:
    """Reorder each disjoint pair ``(2i, 2i+1)`` so the larger (or smaller) entry comes first.

    Ties keep the original order, so the Jacobian is always a permutation.
    """
    a = as_tensor(a)
    x = a.value
    if x.shape[-1] % 2:
        raise ValueError("pair operators need an even last dimension")
    lo, hi = x[..., 0::2], x[..., 1::2]
    swap = hi > lo if larger_first else hi < lo
    _log_branch(swap)
    out = np.empty_like(x)
    out[..., 0::2] = np.where(swap, hi, lo)
    out[..., 1::2] = np.where(swap, lo, hi)

    def bw(g):
        gx = np.empty_like(g)
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx[..., 0::2] = np.where(swap, g1, g0)
        gx[..., 1::2] = np.where(swap, g0, g1)
        _accum(a, gx)

    return _make(out, (a,), bw)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    s = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc / s

    def bw(g):
        # (1/s) (g - mean(g) - y * mean(g * y))
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, (g - gm - y * gy) / s)

    return _make(y, (a,), bw)


def sphere(a, min_norm: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.value
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if (n < min_norm).any():
        raise NumericError("sphere projection of a (near) zero vector")
    y = x / n

    def bw(g):
        _accum(a, (g - y * (g * y).sum(axis=-1, keepdims=True)) / n)

    return _make(y, (a,), bw)


# ---------------------------------------------------------------- linear algebra


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T (+ b)`` over the last axis of ``x``; ``W`` has shape ``(out, in)``."""
    x, W = as_tensor(x), as_tensor(W)
    v = x.value @ W.value.T
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        v = v + b.value
        parents = (x, W, b)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ W.value)
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accum(W, g2.T @ x.value.reshape(-1, x.value.shape[-1]))
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(v, parents, bw)


def rotate(h, re, im) -> Tensor:
    """Multiply interleaved complex lanes ``h = (h_re, h_im, ...)`` by ``re + i im``."""
    h, re, im = as_tensor(h), as_tensor(re), as_tensor(im)
    hr, hi = h.value[..., 0::2], h.value[..., 1::2]
    c, s = re.value, im.value
    out = np.empty(np.broadcast_shapes(h.value.shape[:-1] + (hr.shape[-1] * 2,), c.shape[:-1] + (c.shape[-1] * 2,)))
    out[..., 0::2] = c * hr - s * hi
    out[..., 1::2] = c * hi + s * hr

    def bw(g):
        gr, gi = g[..., 0::2], g[..., 1::2]
        if h.requires_grad:
            gh = np.empty(g.shape)
            gh[..., 0::2] = c * gr + s * gi
            gh[..., 1::2] = -s * gr + c * gi
            _accum(h, _unbroadcast(gh, h.value.shape))
        if re.requires_grad:
            _accum(re, _unbroadcast(gr * hr + gi * hi, re.value.shape))
        if im.requires_grad:
            _accum(im, _unbroadcast(-gr * hi + gi * hr, im.value.shape))

    return _make(out, (h, re, im), bw)


def repeat_lanes(a) -> Tensor:
    """``(..., n) -> (..., 2n)`` duplicating each entry into an interleaved pair."""
    a = as_tensor(a)
    v = np.repeat(a.value, 2, axis=-1)
    return _make(v, (a,), lambda g: _accum(a, g[..., 0::2] + g[..., 1::2]))


def embedding(ids: np.ndarray, E) -> Tensor:
    E = as_tensor(E)
    ids = np.asarray(ids)

    def bw(g):
        onehot = np.zeros((ids.size, E.value.shape[0]))
        onehot[np.arange(ids.size), ids.reshape(-1)] = 1.0
        _accum(E, onehot.T @ g.reshape(-1, g.shape[-1]))

    return _make(E.value[ids], (E,), bw)


def shift_right(a, axis: int = 1) -> Tensor:
    """Delay by one step along ``axis``, filling the first slot with zeros."""
    a = as_tensor(a)
    v = np.zeros_like(a.value)
    src = [slice(None)] * a.value.ndim
    dst = [slice(None)] * a.value.ndim
    src[axis] = slice(0, -1)
    dst[axis] = slice(1, None)
    v[tuple(dst)] = a.value[tuple(src)]

    def bw(g):
        gx = np.zeros_like(g)
        gx[tuple(src)] = g[tuple(dst)]
        _accum(a, gx)

    return _make(v, (a,), bw)


def stack(items, axis: int = 1) -> Tensor:
    items = [as_tensor(t) for t in items]
    v = np.stack([t.value for t in items], axis=axis)

    def bw(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(v, tuple(items), bw)


def unstack(a, axis: int = 1) -> list[Tensor]:
    """Split along ``axis``; gradients flow back into one shared buffer."""
    a = as_tensor(a)
    n = a.value.shape[axis]
    views = [np.take(a.value, i, axis=axis) for i in range(n)]
    if not _TAPES or not a.requires_grad:
        return [Tensor(v) for v in views]
    out = []
    for i, v in enumerate(views):
        idx = [slice(None)] * a.value.ndim
        idx[axis] = i
        out.append(_make(v, (a,), _slice_writer(a, tuple(idx))))
    return out


def _slice_writer(a: Tensor, idx):
    def bw(g):
        if a.grad is None or not a._owned:
            buf = np.zeros_like(a.value) if a.grad is None else a.grad.copy()
            a.grad = buf
            a._owned = True
        a.grad[idx] += g

    return bw


def total(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.asarray(a.value.sum()), (a,), lambda g: _accum(a, np.broadcast_to(g, a.value.shape)))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over every position of ``labels``."""
    logits = as_tensor(logits)
    z = logits.value
    labels = np.asarray(labels)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    count = labels.size
    loss = np.asarray((lse - picked).sum() / count)

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
        _accum(logits, p * (float(g) / count))

    return _make(loss, (logits,), bw)
