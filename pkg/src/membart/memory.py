"""Memory reset, dual attention stream, gated update, and Memformer baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (Params, attend, encoder_layer, feed_forward, key_mask, layer_norm, linear,
                     self_attention)
from .tensor import Tensor


@dataclass
class MemoryState:
    slots: Tensor  # [batch, k, d]
    timestep: int = 0

    @property
    def size(self) -> int:
        return self.slots.shape[1]


def reset_and_normalize(m: MemoryState, reset: np.ndarray, p: Params) -> MemoryState:
    """layer_norm((1 - r) * M + v_b) per lane, applied at every timestep."""
    keep = np.asarray(1.0 - np.asarray(reset, dtype=np.float64), dtype=m.slots.data.dtype)
    kept = m.slots * keep[:, None, None]
    out = layer_norm(kept + p["mem.v_b"], p, "mem.reset_ln")
    return MemoryState(out, m.timestep)


def memory_attention_mask(pad_mask: np.ndarray | None, batch: int, k: int, n: int,
                          memory_mask: str = "diagonal") -> np.ndarray:
    """[B, k+n, k+n] visibility for the joint [memory; input] attention.

    Token rows see every memory slot and every non-padded token. Memory rows
    see the non-padded tokens plus either only their own slot ("diagonal") or
    all slots ("full").
    """
    tokens = np.ones((batch, n), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    mask = np.empty((batch, k + n, k + n), dtype=bool)
    mask[:, :, k:] = tokens[:, None, :]
    mask[:, k:, :k] = True
    if memory_mask == "diagonal":
        mask[:, :k, :k] = np.eye(k, dtype=bool)
    elif memory_mask == "full":
        mask[:, :k, :k] = True
    else:
        raise ValueError(f"unknown memory mask {memory_mask!r}")
    return mask


def dual_stream_layer(h: Tensor, m: Tensor, p: Params, name: str, heads: int,
                      pad_mask=None, memory_mask: str = "diagonal") -> tuple[Tensor, Tensor]:
    """One encoder layer with separate input and memory streams.

    Input tokens read memory by attending over [K_M; K_H]; memory slots write
    by attending over their own key plus all K_H. Projections for the two
    streams are looked up under ``name.h`` and ``name.m``.
    """
    k = m.shape[1]
    n = h.shape[1]
    if k == 0:
        return encoder_layer(h, p, name + ".h", heads, pad_mask), m

    hn = layer_norm(h, p, name + ".h.ln1")
    mn = layer_norm(m, p, name + ".m.ln1")
    q = T.concat([linear(mn, p, name + ".m.attn.q"), linear(hn, p, name + ".h.attn.q")], axis=1)
    kk = T.concat([linear(mn, p, name + ".m.attn.k"), linear(hn, p, name + ".h.attn.k")], axis=1)
    v = T.concat([linear(mn, p, name + ".m.attn.v"), linear(hn, p, name + ".h.attn.v")], axis=1)
    mask = memory_attention_mask(pad_mask, h.shape[0], k, n, memory_mask)
    out = attend(q, kk, v, heads, mask, "enc")
    h = h + linear(out[:, k:], p, name + ".h.attn.o")
    m = m + linear(out[:, :k], p, name + ".m.attn.o")
    h = h + feed_forward(layer_norm(h, p, name + ".h.ln2"), p, name + ".h.ff")
    m = m + feed_forward(layer_norm(m, p, name + ".m.ln2"), p, name + ".m.ff")
    return h, m


def gated_memory_update(h_m: Tensor, m_prev: MemoryState, p: Params) -> tuple[MemoryState, Tensor]:
    """z * MLP(H_M) + (1 - z) * M_prev with one sigmoid gate per slot.

    Returns the new memory and the gate values [B, k].
    """
    candidate = feed_forward(h_m, p, "mem.mlp")
    z = T.sigmoid(linear(h_m, p, "mem.gate"))  # [B, k, 1]
    out = z * candidate + (1.0 - z) * m_prev.slots
    return MemoryState(out, m_prev.timestep + 1), z.reshape(z.shape[0], z.shape[1])


def memformer_read(h: Tensor, m: Tensor, p: Params, name: str, heads: int) -> Tensor:
    """Cross-attention branch from input states to memory (no residual added).

    The caller adds the branch to ``h``, optionally through ``rezero_gate``.
    """
    hn = layer_norm(h, p, name + ".ln")
    q = linear(hn, p, name + ".q")
    k = linear(m, p, name + ".k")
    v = linear(m, p, name + ".v")
    return linear(attend(q, k, v, heads, None, "mem_read"), p, name + ".o")


def memformer_write(m: Tensor, h_last: Tensor, p: Params, heads: int, pad_mask=None) -> Tensor:
    """Each slot queries [its own key; final-layer keys] and mixes [m_i; V_H]."""
    b, k, _ = m.shape
    n = h_last.shape[1]
    q = linear(m, p, "mem.write.q")
    keys = T.concat([linear(m, p, "mem.write.k"), linear(h_last, p, "mem.write.k")], axis=1)
    values = T.concat([m, linear(h_last, p, "mem.write.v")], axis=1)
    tokens = np.ones((b, n), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    mask = np.empty((b, k, k + n), dtype=bool)
    mask[:, :, :k] = np.eye(k, dtype=bool)
    mask[:, :, k:] = tokens[:, None, :]
    return attend(q, keys, values, heads, mask, "mem_write")


def rezero_gate(branch: Tensor, alpha: Tensor) -> Tensor:
    return branch * alpha


def memformer_layer(h: Tensor, m: Tensor, p: Params, name: str, heads: int, pad_mask=None,
                    rezero: bool = False) -> Tensor:
    """Self-attention, memory cross-attention, then feed-forward."""
    n = h.shape[1]
    h = h + self_attention(layer_norm(h, p, name + ".h.ln1"), p, name + ".h.attn", heads,
                           key_mask(pad_mask, n), "enc")
    branch = memformer_read(h, m, p, name + ".read", heads)
    h = h + (rezero_gate(branch, p[name + ".read.alpha"]) if rezero else branch)
    return h + feed_forward(layer_norm(h, p, name + ".h.ln2"), p, name + ".h.ff")
