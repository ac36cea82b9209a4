"""Mutual and guided self attention, and the summation fusion head.

All functions accept batched ``[B, rows, width]`` inputs with ``[B, rows]``
masks (zero marks padding) or a single unbatched ``[rows, width]``
example.  Pooled outputs are always weighted sums of the original input
rows, so they stay inside the rows' per-coordinate envelope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    AttentionParams,
    FeedForward,
    LayerNorm,
    LayerStack,
    Linear,
    Module,
    multi_head_attention,
)
from .tensor import DimensionError, Tensor, add, broadcast_to, concat, matmul, reshape, softmax

BRANCHES = ("v_m", "q_mv", "v_s", "q_sv", "r_m", "q_mr", "r_s", "q_sr")
ATTENTION_MODES = ("mutual", "self", "msa")


@dataclass
class AttendedSet:
    x_m: Tensor | None = None
    y_m: Tensor | None = None
    x_s: Tensor | None = None
    y_s: Tensor | None = None
    z_xy: Tensor | None = None
    z_yx: Tensor | None = None
    psi_x: Tensor | None = None
    psi_yx: Tensor | None = None


class EncoderLayer(Module):
    def __init__(self, rng, width, heads, ff_hidden):
        self.attn = AttentionParams(rng, width, heads)
        self.norm_attn = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff_hidden)
        self.norm_ff = LayerNorm(width)

    def __call__(self, x, mask):
        x = self.norm_attn(add(x, multi_head_attention(x, x, x, self.attn, key_mask=mask)))
        return self.norm_ff(add(x, self.ff(x)))


class GuidedLayer(Module):
    """Self-attention on y, then attention from y into the encoded guide."""

    def __init__(self, rng, width, heads, ff_hidden):
        self.self_attn = AttentionParams(rng, width, heads)
        self.norm_self = LayerNorm(width)
        self.guide_attn = AttentionParams(rng, width, heads)
        self.norm_guide = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff_hidden)
        self.norm_ff = LayerNorm(width)

    def __call__(self, y, y_mask, guide, guide_mask):
        y = self.norm_self(add(y, multi_head_attention(y, y, y, self.self_attn, key_mask=y_mask)))
        y = self.norm_guide(add(y, multi_head_attention(y, guide, guide, self.guide_attn,
                                                        key_mask=guide_mask)))
        return self.norm_ff(add(y, self.ff(y)))


class MsaBlockParams(Module):
    def __init__(self, rng, d_x, d_y, width=32, heads=4, layers=2, mlp_hidden=32, ff_hidden=None):
        if width % heads:
            raise ValueError(f"model width {width} not divisible by {heads} heads")
        ff_hidden = ff_hidden or 2 * width
        self.d_x = d_x
        self.d_y = d_y
        self.width = width
        self.heads = heads
        # mutual attention: one 3-layer scorer per direction
        self.mutual_y = LayerStack(rng, [d_y + d_x, mlp_hidden, mlp_hidden, 1])
        self.mutual_x = LayerStack(rng, [d_x + d_y, mlp_hidden, mlp_hidden, 1])
        # guided self attention
        self.proj_x = Linear(rng, d_x, width)
        self.proj_y = Linear(rng, d_y, width)
        self.encoder = [EncoderLayer(rng, width, heads, ff_hidden) for _ in range(layers)]
        self.guided = [GuidedLayer(rng, width, heads, ff_hidden) for _ in range(layers)]
        self.score_x = Linear(rng, width, 1)
        self.score_y = Linear(rng, width, 1)


def _batched(t, mask):
    if t.ndim == 2:
        t = reshape(t, (1,) + t.shape)
        mask = None if mask is None else np.asarray(mask)[None]
        return t, mask, True
    return t, mask, False


def _full_mask(t, mask):
    if mask is None:
        return np.ones(t.shape[:2], dtype=np.uint8)
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape != t.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} != rows {t.shape[:2]}")
    if np.any(mask.sum(axis=1) == 0):
        raise ValueError("every example needs at least one unmasked row")
    return mask


def masked_mean(t, mask):
    """Mean over unmasked rows: ``[B, n, d] -> [B, 1, d]``."""
    w = mask / mask.sum(axis=1, keepdims=True)
    return matmul(Tensor(w[:, None, :]), t)


def weighted_rows(weights, rows):
    """``sum_i weights[:, i] * rows[:, i]`` as ``[B, d]``."""
    b, n = weights.shape
    return reshape(matmul(reshape(weights, (b, 1, n)), rows), (b, rows.shape[2]))


def _row_scores(stack, rows, partner_mean):
    b, n, _ = rows.shape
    joined = concat([rows, broadcast_to(partner_mean, (b, n, partner_mean.shape[2]))], axis=-1)
    return reshape(stack(joined), (b, n))


def _check_widths(x, y, params):
    if x.shape[-1] != params.d_x or y.shape[-1] != params.d_y:
        raise DimensionError(
            f"block expects widths ({params.d_x}, {params.d_y}), got ({x.shape[-1]}, {y.shape[-1]})")


def _squeeze(t, unbatched):
    if t is None or not unbatched:
        return t
    return reshape(t, t.shape[1:])


def mutual_attention(x, y, params, x_mask=None, y_mask=None):
    """Returns ``(x_m, y_m, z_xy, z_yx)``.

    Each row of one input is scored by an MLP on the row joined with the
    mean of the other input; scores are softmax-normalized and used to
    pool the rows.
    """
    x, x_mask, unbatched = _batched(x, x_mask)
    y, y_mask, _ = _batched(y, y_mask)
    _check_widths(x, y, params)
    x_mask, y_mask = _full_mask(x, x_mask), _full_mask(y, y_mask)
    x_bar = masked_mean(x, x_mask)
    y_bar = masked_mean(y, y_mask)
    z_yx = softmax(_row_scores(params.mutual_y, y, x_bar), mask=y_mask)
    z_xy = softmax(_row_scores(params.mutual_x, x, y_bar), mask=x_mask)
    out = (weighted_rows(z_xy, x), weighted_rows(z_yx, y), z_xy, z_yx)
    return tuple(_squeeze(t, unbatched) for t in out)


def guided_self_attention(x, y, params, x_mask=None, y_mask=None):
    """Returns ``(x_s, y_s, psi_x, psi_yx)``.

    x passes through the encoder stack; y through guided layers that
    attend into the encoded x.  Each encoded row is reduced to one score.
    """
    x, x_mask, unbatched = _batched(x, x_mask)
    y, y_mask, _ = _batched(y, y_mask)
    _check_widths(x, y, params)
    x_mask, y_mask = _full_mask(x, x_mask), _full_mask(y, y_mask)
    hx = params.proj_x(x)
    for layer in params.encoder:
        hx = layer(hx, x_mask)
    hy = params.proj_y(y)
    for layer in params.guided:
        hy = layer(hy, y_mask, hx, x_mask)
    b = x.shape[0]
    psi_x = softmax(reshape(params.score_x(hx), (b, x.shape[1])), mask=x_mask)
    psi_yx = softmax(reshape(params.score_y(hy), (b, y.shape[1])), mask=y_mask)
    out = (weighted_rows(psi_x, x), weighted_rows(psi_yx, y), psi_x, psi_yx)
    return tuple(_squeeze(t, unbatched) for t in out)


def msa_block(x, y, params, x_mask=None, y_mask=None, mode="msa"):
    """Mutual and/or guided self attention; ``x`` is the question (guide)."""
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    out = AttendedSet()
    if mode in ("mutual", "msa"):
        out.x_m, out.y_m, out.z_xy, out.z_yx = mutual_attention(x, y, params, x_mask, y_mask)
    if mode in ("self", "msa"):
        out.x_s, out.y_s, out.psi_x, out.psi_yx = guided_self_attention(x, y, params, x_mask, y_mask)
    return out


class FusionParams(Module):
    """One bias-free projection per attended vector, then the answer layer.

    Only branches named in ``widths`` get a projection; the rest are
    treated as absent.
    """

    def __init__(self, rng, widths, fused_width, n_answers):
        unknown = set(widths) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown branches {sorted(unknown)}")
        self.widths = dict(widths)
        self.proj = {name: Linear(rng, widths[name], fused_width, bias=False)
                     for name in BRANCHES if name in widths}
        self.answer = Linear(rng, fused_width, n_answers)
        self.fused_width = fused_width


def fuse_and_classify(vectors, fusion):
    """Sum the projected attended vectors and map to answer logits.

    ``vectors`` maps each of the 8 branch names to a ``[B, w]`` (or
    ``[w]``) tensor, or to ``None`` for a branch that is zeroed out.
    """
    if set(vectors) != set(BRANCHES):
        raise DimensionError(f"expected the 8 branches {BRANCHES}, got {sorted(vectors)}")
    total = None
    for name in BRANCHES:
        vec = vectors[name]
        if vec is None:
            continue
        if name not in fusion.proj:
            raise DimensionError(f"fusion head has no projection for branch {name!r}")
        if vec.shape[-1] != fusion.widths[name]:
            raise DimensionError(f"branch {name!r}: width {vec.shape[-1]} != {fusion.widths[name]}")
        part = fusion.proj[name](vec)
        total = part if total is None else add(total, part)
    if total is None:
        total = Tensor(np.zeros(fusion.fused_width))
    return fusion.answer(total)
