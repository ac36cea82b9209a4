"""Parameter containers and the small building blocks shared by the models."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    glorot,
    layer_norm,
    matmul,
    param,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


class Module:
    """Walks attributes to find parameters; order follows attribute order."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"parameter names differ: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = param(glorot(rng, n_in, n_out))
        self.bias = param(np.zeros(n_out)) if bias else None
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x):
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"Linear expects width {self.n_in}, got {x.shape[-1]}")
        y = matmul(x, self.weight)
        return y if self.bias is None else add(y, self.bias)


class LayerStack(Module):
    """Affine layers chained ``widths[0] -> widths[1] -> ... -> widths[-1]``."""

    def __init__(self, rng, widths):
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        self.layers = [Linear(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def widths(self):
        return [self.layers[0].n_in] + [lay.n_out for lay in self.layers]

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_forward(stack, x):
    """ReLU after every layer except the last, which stays affine."""
    n = len(stack.layers)
    for i, layer in enumerate(stack.layers):
        x = layer(x)
        if i < n - 1:
            x = relu(x)
    return x


class LayerNorm(Module):
    def __init__(self, width):
        self.gamma = param(np.ones(width))
        self.beta = param(np.zeros(width))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng, width, hidden):
        self.inner = Linear(rng, width, hidden)
        self.outer = Linear(rng, hidden, width)

    def __call__(self, x):
        return self.outer(relu(self.inner(x)))


class AttentionParams(Module):
    def __init__(self, rng, width, heads):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.width = width
        self.query = Linear(rng, width, width)
        self.key = Linear(rng, width, width)
        self.value = Linear(rng, width, width)
        self.out = Linear(rng, width, width)


def multi_head_attention(queries, keys, values, params, key_mask=None, return_weights=False):
    """Scaled dot-product attention over ``params.heads`` heads.

    Inputs are ``[B, p, d]`` / ``[B, s, d]`` (or unbatched ``[p, d]``).
    ``key_mask`` is ``[B, s]`` with zeros at padded keys.  Residual and
    normalization belong to the caller.
    """
    d = params.width
    for t in (queries, keys, values):
        if t.shape[-1] != d:
            raise DimensionError(f"attention width {d} does not match input width {t.shape[-1]}")
    unbatched = queries.ndim == 2
    if unbatched:
        queries = reshape(queries, (1,) + queries.shape)
        keys = reshape(keys, (1,) + keys.shape)
        values = reshape(values, (1,) + values.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    b, p, _ = queries.shape
    s = keys.shape[1]
    h = params.heads
    dh = d // h
    q = transpose(reshape(params.query(queries), (b, p, h, dh)), (0, 2, 1, 3))
    k = transpose(reshape(params.key(keys), (b, s, h, dh)), (0, 2, 3, 1))
    v = transpose(reshape(params.value(values), (b, s, h, dh)), (0, 2, 1, 3))
    scores = scale(matmul(q, k), 1.0 / math.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask)[:, None, None, :]
    weights = softmax(scores, axis=-1, mask=mask)
    mixed = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, p, d))
    out = params.out(mixed)
    if unbatched:
        out = reshape(out, (p, d))
    if return_weights:
        return out, weights
    return out
