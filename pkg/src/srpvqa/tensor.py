"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record onto the innermost active :class:`Tape`.  Outside a tape, ops
run as plain numpy computations and nothing is recorded::

    with Tape() as tape:
        loss = cross_entropy(logits, target)
    grads = backward(tape, loss)
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

_TAPES: list = []


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    Recording order is execution order, so the list is already a
    topological order of the graph.  One forward/backward at a time.
    """

    check_finite = True

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def _make(out, inputs, backward):
    """Wrap a forward result and record it when any input is tracked."""
    if Tape.check_finite and not np.isfinite(out.sum()):
        raise NonFiniteError("non-finite value produced by forward op")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node_id = None
    t.requires_grad = False
    if _TAPES:
        for x in inputs:
            if x.requires_grad:
                tape = _TAPES[-1]
                t.requires_grad = True
                t.node_id = len(tape.records)
                tape.records.append(_Record(t, inputs, backward))
                break
    return t


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 1 and shape[0] == grad.shape[-1]:
        return grad.reshape(-1, shape[0]).sum(axis=0)
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    ad = a.data
    return _make(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),))


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- structure

def matmul(a, b):
    """Matrix product over the last two axes, numpy batch semantics."""
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {list(ad.shape)} @ {list(bd.shape)}")
    if bd.ndim == 2 and ad.ndim > 2:
        return _matmul_folded(a, b)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def _matmul_folded(a, b):
    # [..., k] @ [k, n]: fold leading axes into one GEMM
    ad, bd = a.data, b.data
    k, n = bd.shape
    lead = ad.shape[:-1]
    a2 = ad.reshape(-1, k)

    def back(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make((a2 @ bd).reshape(lead + (n,)), (a, b), back)


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def broadcast_to(a, shape):
    old = a.data.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),))


def take_rows(table, ids):
    """Row gather ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.data.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), back)


def index(a, key):
    """Basic or fancy indexing with a scatter-add gradient."""
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key], dtype=np.float64), (a,), back)


# ---------------------------------------------------------------- fused

def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries with ``mask == 0`` get probability 0.

    A slice whose entries are all masked comes out as all zeros.
    """
    xd = x.data
    moved = axis not in (-1, xd.ndim - 1)
    if moved:
        xd = np.moveaxis(xd, axis, -1)
    shape = xd.shape
    flat = np.ascontiguousarray(xd).reshape(-1, shape[-1])
    m2 = None
    if mask is not None:
        m = np.asarray(mask)
        if moved:
            m = np.moveaxis(np.broadcast_to(m, x.data.shape), axis, -1)
        m2 = np.ascontiguousarray(np.broadcast_to(m, shape), dtype=np.uint8).reshape(-1, shape[-1])
    y = kernels.softmax_forward(flat, m2)

    def back(g):
        if moved:
            g = np.moveaxis(g, axis, -1)
        gx = kernels.softmax_backward(y, np.ascontiguousarray(g).reshape(-1, shape[-1])).reshape(shape)
        if moved:
            gx = np.moveaxis(gx, -1, axis)
        return (gx,)

    out = y.reshape(shape)
    if moved:
        out = np.ascontiguousarray(np.moveaxis(out, -1, axis))
    return _make(out, (x,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    shape = x.data.shape
    n = shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise DimensionError("layer_norm gain/bias width mismatch")
    y, xhat, rstd = kernels.layer_norm_forward(x.data.reshape(-1, n), gamma.data, beta.data, eps)
    gd = gamma.data

    def back(g):
        gx, gg, gb = kernels.layer_norm_backward(np.ascontiguousarray(g).reshape(-1, n), xhat, rstd, gd)
        return gx.reshape(shape), gg, gb

    return _make(y.reshape(shape), (x, gamma, beta), back)


def cross_entropy(logits, target):
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is ``[|A|]`` with an integer target, or ``[B, |A|]`` with
    a length-``B`` target array.
    """
    ld = logits.data
    single = ld.ndim == 1
    l2 = ld.reshape(1, -1) if single else ld
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != l2.shape[0]:
        raise DimensionError("one target per logit row required")
    k = l2.shape[1]
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"target out of range for {k} classes")
    losses, probs = kernels.cross_entropy_forward(l2, t)
    rows = l2.shape[0]

    def back(g):
        d = probs.copy()
        d[np.arange(rows), t] -= 1.0
        d *= float(g) / rows
        return (d.reshape(ld.shape),)

    return _make(np.array(losses.mean()), (logits,), back)


# ---------------------------------------------------------------- backward

def backward(tape, loss):
    """Propagate d(loss) through ``tape``; returns ``{leaf: grad}``.

    Leaf gradients are also accumulated into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for x, gx in zip(rec.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if x.node_id is None:
                leaves[key] = x
            prev = grads.get(key)
            grads[key] = gx if prev is None else prev + gx
    out = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def grad_check(fn, inputs, eps=1e-5, max_coords=None, rng=None, floor=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` must return a scalar Tensor.  The error per coordinate
    is ``|g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)``; the floor keeps
    round-off in the difference quotient from dominating coordinates whose
    true gradient is essentially zero.  ``max_coords`` limits how many
    coordinates of each input are probed.
    """
    inputs = list(inputs)
    saved = [(x.requires_grad, x.grad) for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    g_map = backward(tape, loss)
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for x in inputs:
        g_ad = g_map.get(x, np.zeros_like(x.data)).reshape(-1)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            up = fn(*inputs).item()
            flat[i] = old - eps
            down = fn(*inputs).item()
            flat[i] = old
            g_fd = (up - down) / (2.0 * eps)
            err = abs(g_ad[i] - g_fd) / max(floor, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    for x, (rg, gr) in zip(inputs, saved):
        x.requires_grad = rg
        x.grad = gr
    return worst


# every op that records a backward rule; composites are built from these
DIFFERENTIABLE_OPS = ("add", "sub", "mul", "scale", "relu", "square", "tsum", "mean", "matmul",
                      "reshape", "transpose", "concat", "broadcast_to", "take_rows", "index",
                      "softmax", "layer_norm", "cross_entropy")


# ---------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        elif np.shape(g) != p.data.shape:
            raise DimensionError(f"grad shape {np.shape(g)} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
