"""Toy contextual text encoder and bounding-box grounding.

The encoder plays the part of a pretrained sentence model: hashed token
embeddings, an optional sinusoidal position signal, then one
self-attention block and one feed-forward block, each with a residual
connection and layer normalization.  Any object with the same
``encode_batch`` signature can replace it.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import numpy as np

from .layers import AttentionParams, FeedForward, LayerNorm, Module, multi_head_attention
from .tensor import DimensionError, Tensor, add, concat, param, reshape, take_rows

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


@dataclass(frozen=True)
class Token:
    surface: str
    id: int


def token_id(surface, vocab_size=4096):
    return zlib.crc32(surface.encode("utf-8")) % vocab_size


def tokenize(text, vocab_size=4096):
    """Split on whitespace and punctuation; punctuation marks are tokens.

    Case is preserved, so ``"A"`` and ``"a"`` hash to different buckets.
    """
    if not text or not text.strip():
        raise ValueError("cannot tokenize an empty string")
    return [Token(s, token_id(s, vocab_size)) for s in _TOKEN_RE.findall(text)]


def sinusoidal_positions(length, width):
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TextEncoderParams(Module):
    def __init__(self, rng, width=32, heads=4, vocab_size=4096, ff_hidden=None, positional=True):
        self.vocab_size = vocab_size
        self.width = width
        self.positional = positional
        self.table = param(rng.normal(0.0, 1.0, size=(vocab_size, width)))
        self.attn = AttentionParams(rng, width, heads)
        self.norm_attn = LayerNorm(width)
        self.ff = FeedForward(rng, width, ff_hidden or 2 * width)
        self.norm_ff = LayerNorm(width)


def encode_batch(params, ids, mask=None):
    """Encode padded id matrix ``[B, T]`` to ``[B, T, d]`` contextual rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise DimensionError("encode_batch needs a non-empty [B, T] id matrix")
    x = take_rows(params.table, ids)
    if params.positional:
        x = add(x, Tensor(sinusoidal_positions(ids.shape[1], params.width)))
    x = params.norm_attn(add(x, multi_head_attention(x, x, x, params.attn, key_mask=mask)))
    return params.norm_ff(add(x, params.ff(x)))


def encode_text(params, tokens):
    """Contextual features ``[m, d_q]``, one row per token."""
    if len(tokens) == 0:
        raise ValueError("encode_text needs at least one token")
    ids = np.array([[t.id for t in tokens]], dtype=np.int64)
    out = encode_batch(params, ids)
    return reshape(out, (len(tokens), params.width))


def ground_with_boxes(features, boxes):
    """Append normalized box coordinates to each feature row.

    ``boxes`` has 4 columns for region rows and 8 for relationship rows
    (subject box then object box).
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    b = np.asarray(boxes, dtype=np.float64)
    k = feats.shape[0]
    if b.ndim != 2 or b.shape[0] != k:
        raise DimensionError(f"{k} feature rows but boxes of shape {b.shape}")
    if b.shape[1] not in (4, 8):
        raise DimensionError("boxes need 4 or 8 coordinates per row")
    if b.size and (b.min() < 0.0 or b.max() > 1.0):
        raise ValueError("box coordinates must be normalized to [0, 1]")
    if k == 0:
        return Tensor(np.zeros((0, feats.shape[1] + b.shape[1])))
    return concat([feats, Tensor(b)], axis=-1)
