"""Transformer building blocks shared by the encoder, decoder and memory paths.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names; each
block takes the dict plus a name prefix.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict


class AttentionCounter:
    """Accumulates query-key score products, per head, keyed by a tag."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, tag: str, n_queries: int, n_keys: int) -> None:
        self.counts[tag] = self.counts.get(tag, 0) + n_queries * n_keys

    def get(self, tag: str) -> int:
        return self.counts.get(tag, 0)


_counter: AttentionCounter | None = None


@contextlib.contextmanager
def count_attention():
    global _counter
    old = _counter
    _counter = AttentionCounter()
    try:
        yield _counter
    finally:
        _counter = old


def linear(x: Tensor, p: Params, name: str) -> Tensor:
    return T.linear(x, p[name + ".w"], p.get(name + ".b"))


def layer_norm(x: Tensor, p: Params, name: str) -> Tensor:
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"])


def feed_forward(x: Tensor, p: Params, name: str) -> Tensor:
    return linear(T.gelu(linear(x, p, name + ".fc1")), p, name + ".fc2")


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(x.reshape(b, n, heads, d // heads), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(b, n, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None,
           tag: str = "attn") -> Tensor:
    """Multi-head scaled dot-product attention on already-projected inputs.

    q: [B, nq, d]; k, v: [B, nk, d]; mask broadcastable to [B, nq, nk]
    with True marking visible keys.
    """
    if _counter is not None:
        _counter.add(tag, q.shape[1], k.shape[1])
    dh = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.matmul(qh, T.swap_last(kh)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3:
            mask = mask[:, None, :, :]
    probs = T.softmax_rows(scores, mask)
    return merge_heads(T.matmul(probs, vh))


def self_attention(x: Tensor, p: Params, name: str, heads: int, mask, tag: str) -> Tensor:
    q = linear(x, p, name + ".q")
    k = linear(x, p, name + ".k")
    v = linear(x, p, name + ".v")
    return linear(attend(q, k, v, heads, mask, tag), p, name + ".o")


def cross_attention(x: Tensor, ctx: Tensor, p: Params, name: str, heads: int, mask, tag: str) -> Tensor:
    q = linear(x, p, name + ".q")
    k = linear(ctx, p, name + ".k")
    v = linear(ctx, p, name + ".v")
    return linear(attend(q, k, v, heads, mask, tag), p, name + ".o")


def key_mask(pad_mask: np.ndarray | None, n_queries: int) -> np.ndarray | None:
    """[B, nk] validity -> [B, nq, nk] attention mask."""
    if pad_mask is None:
        return None
    pad_mask = np.asarray(pad_mask, dtype=bool)
    return np.broadcast_to(pad_mask[:, None, :], (pad_mask.shape[0], n_queries, pad_mask.shape[1]))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))[None]


def encoder_layer(h: Tensor, p: Params, name: str, heads: int, pad_mask, tag: str = "enc") -> Tensor:
    """Standard pre-norm Transformer encoder layer."""
    n = h.shape[1]
    h = h + self_attention(layer_norm(h, p, name + ".ln1"), p, name + ".attn", heads,
                           key_mask(pad_mask, n), tag)
    return h + feed_forward(layer_norm(h, p, name + ".ln2"), p, name + ".ff")


def decoder_layer(x: Tensor, enc: Tensor, p: Params, name: str, heads: int, src_mask) -> Tensor:
    m = x.shape[1]
    x = x + self_attention(layer_norm(x, p, name + ".ln1"), p, name + ".self", heads,
                           causal_mask(m), "dec_self")
    x = x + cross_attention(layer_norm(x, p, name + ".ln2"), enc, p, name + ".cross", heads,
                            key_mask(src_mask, m), "dec_cross")
    return x + feed_forward(layer_norm(x, p, name + ".ln3"), p, name + ".ff")
