"""Stateful encoder-decoder assembly and generation."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import Params, decoder_layer, encoder_layer, layer_norm, linear
from .memory import (MemoryState, dual_stream_layer, gated_memory_update, memformer_layer,
                     memformer_write, reset_and_normalize)
from .tensor import Tensor

VARIANTS = ("membart", "memformer_insert", "memformer_rezero", "membart_shared", "stateless")

PAD, MASK, BOS, EOS = 0, 1, 2, 3
N_SPECIAL = 4
LOGIT_SCALE_INIT = 0.1


@dataclass
class ModelConfig:
    variant: str = "membart"
    encoder_layers: int = 2
    decoder_layers: int = 2
    hidden_size: int = 64
    heads: int = 4
    memory_size: int = 8
    vocab_size: int = 256
    max_positions: int = 64
    feed_forward_expansion: int = 4
    memory_mask: str = "diagonal"
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.memory_size < 0:
            raise ValueError("memory_size must be >= 0")
        if self.hidden_size % self.heads:
            raise ValueError("hidden_size must be divisible by heads")
        if self.memory_mask not in ("diagonal", "full"):
            raise ValueError(f"unknown memory mask {self.memory_mask!r}")

    @property
    def stateful(self) -> bool:
        return self.variant != "stateless" and self.memory_size > 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodeResult:
    encoder_states: Tensor
    next_memory: MemoryState
    gate_values: Tensor | None


# -- parameters ----------------------------------------------------------

def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class _Builder:
    def __init__(self, seed: int, dtype):
        self.seed = seed
        self.dtype = dtype
        self.params: Params = {}

    def _put(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, name=name, dtype=self.dtype)

    def normal(self, name: str, shape, std: float) -> None:
        self._put(name, _rng_for(self.seed, name).normal(0.0, std, size=shape))

    def const(self, name: str, shape, value: float) -> None:
        self._put(name, np.full(shape, value))

    def linear(self, name: str, n_in: int, n_out: int, std: float | None = None) -> None:
        self.normal(name + ".w", (n_in, n_out), n_in ** -0.5 if std is None else std)
        self.const(name + ".b", (n_out,), 0.0)

    def norm(self, name: str, d: int) -> None:
        self.const(name + ".g", (d,), 1.0)
        self.const(name + ".b", (d,), 0.0)

    def attn(self, name: str, d: int) -> None:
        for part in ("q", "k", "v", "o"):
            self.linear(f"{name}.{part}", d, d)

    def ff(self, name: str, d: int, expansion: int) -> None:
        self.linear(name + ".fc1", d, expansion * d)
        self.linear(name + ".fc2", expansion * d, d)

    def stream(self, name: str, d: int, expansion: int) -> None:
        self.norm(name + ".ln1", d)
        self.attn(name + ".attn", d)
        self.norm(name + ".ln2", d)
        self.ff(name + ".ff", d, expansion)


def init_params(cfg: ModelConfig, dtype=None) -> Params:
    """Build all parameters; each tensor is seeded by (cfg.seed, its name).

    Name-keyed seeding makes tensors that share a name identical across
    variants, so a memory-free model and a k=0 MemBART start equal.
    """
    d, e, k = cfg.hidden_size, cfg.feed_forward_expansion, cfg.memory_size
    b = _Builder(cfg.seed, dtype or T.get_dtype())
    b.normal("emb.tok", (cfg.vocab_size, d), 1.0)
    b.normal("emb.pos", (cfg.max_positions, d), 1.0)
    for i in range(cfg.encoder_layers):
        b.stream(f"enc.{i}.h", d, e)
    b.norm("enc.ln_f", d)
    for i in range(cfg.decoder_layers):
        name = f"dec.{i}"
        b.norm(name + ".ln1", d)
        b.attn(name + ".self", d)
        b.norm(name + ".ln2", d)
        b.attn(name + ".cross", d)
        b.norm(name + ".ln3", d)
        b.ff(name + ".ff", d, e)
    b.norm("dec.ln_f", d)
    if cfg.tie_embeddings:
        b.const("out.b", (cfg.vocab_size,), 0.0)
        b.const("out.scale", (), LOGIT_SCALE_INIT)
    else:
        b.linear("out", d, cfg.vocab_size, std=0.02)

    p = b.params
    if cfg.variant == "stateless":
        return p
    b.normal("mem.v_b", (k, d), 1.0)
    b.norm("mem.reset_ln", d)
    if cfg.variant in ("membart", "membart_shared"):
        for i in range(cfg.encoder_layers):
            if cfg.variant == "membart":
                b.stream(f"enc.{i}.m", d, e)
            else:
                for key in [n for n in p if n.startswith(f"enc.{i}.h.")]:
                    p[f"enc.{i}.m." + key[len(f"enc.{i}.h."):]] = p[key]
        if cfg.variant == "membart":
            b.norm("enc.m_ln_f", d)
        else:
            p["enc.m_ln_f.g"], p["enc.m_ln_f.b"] = p["enc.ln_f.g"], p["enc.ln_f.b"]
        b.ff("mem.mlp", d, e)
        b.linear("mem.gate", d, 1)
    else:
        for i in range(cfg.encoder_layers):
            b.norm(f"enc.{i}.read.ln", d)
            b.attn(f"enc.{i}.read", d)
            if cfg.variant == "memformer_rezero":
                b.const(f"enc.{i}.read.alpha", (), 0.0)
        b.linear("mem.write.q", d, d)
        b.linear("mem.write.k", d, d)
        b.linear("mem.write.v", d, d)
    return p


def unique_params(p: Params) -> list[tuple[str, Tensor]]:
    """Parameters with aliases collapsed onto their first name."""
    seen: set[int] = set()
    out = []
    for name, t in p.items():
        if id(t) not in seen:
            seen.add(id(t))
            out.append((name, t))
    return out


def count_parameters(p: Params) -> int:
    return sum(t.size for _, t in unique_params(p))


def zero_grads(p: Params) -> None:
    for t in p.values():
        t.grad = None


def initial_memory(p: Params, cfg: ModelConfig, batch: int) -> MemoryState:
    """layer_norm(v_b) broadcast over lanes; zeros for memory-free variants."""
    d, k = cfg.hidden_size, cfg.memory_size
    if "mem.v_b" not in p:
        return MemoryState(Tensor(np.zeros((batch, k, d))))
    with T.no_grad():
        m0 = layer_norm(p["mem.v_b"], p, "mem.reset_ln")
    return MemoryState(Tensor(np.broadcast_to(m0.data, (batch, k, d)).copy(), dtype=m0.data.dtype))


# -- forward -------------------------------------------------------------

def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("token ids must be [batch, length]")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    if ids.shape[1] > cfg.max_positions:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions {cfg.max_positions}")
    return ids


def embed(p: Params, ids: np.ndarray) -> Tensor:
    n = ids.shape[1]
    return T.embedding(p["emb.tok"], ids) + p["emb.pos"][:n]


def encode(p: Params, cfg: ModelConfig, src, memory: MemoryState, reset=None,
           pad_mask=None) -> EncodeResult:
    src = _check_ids(src, cfg)
    batch = src.shape[0]
    if reset is None:
        reset = np.zeros(batch)
    h = embed(p, src)
    heads = cfg.heads

    if not cfg.stateful:
        for i in range(cfg.encoder_layers):
            h = encoder_layer(h, p, f"enc.{i}.h", heads, pad_mask)
        h = layer_norm(h, p, "enc.ln_f")
        if cfg.variant == "stateless":
            return EncodeResult(h, memory, None)
        # k = 0: nothing to carry
        return EncodeResult(h, MemoryState(memory.slots, memory.timestep + 1), None)

    m_in = reset_and_normalize(memory, reset, p)
    if cfg.variant in ("membart", "membart_shared"):
        m = m_in.slots
        for i in range(cfg.encoder_layers):
            h, m = dual_stream_layer(h, m, p, f"enc.{i}", heads, pad_mask, cfg.memory_mask)
        h = layer_norm(h, p, "enc.ln_f")
        h_m = layer_norm(m, p, "enc.m_ln_f")
        nxt, z = gated_memory_update(h_m, m_in, p)
        return EncodeResult(h, nxt, z)

    rezero = cfg.variant == "memformer_rezero"
    for i in range(cfg.encoder_layers):
        h = memformer_layer(h, m_in.slots, p, f"enc.{i}", heads, pad_mask, rezero)
    h = layer_norm(h, p, "enc.ln_f")
    m_next = memformer_write(m_in.slots, h, p, heads, pad_mask)
    return EncodeResult(h, MemoryState(m_next, memory.timestep + 1), None)


def decode(p: Params, cfg: ModelConfig, tgt_in, encoder_states: Tensor, pad_mask=None) -> Tensor:
    """Causal decoder over ``tgt_in`` (already BOS-shifted); returns logits."""
    tgt_in = _check_ids(tgt_in, cfg)
    x = embed(p, tgt_in)
    for i in range(cfg.decoder_layers):
        x = decoder_layer(x, encoder_states, p, f"dec.{i}", cfg.heads, pad_mask)
    x = layer_norm(x, p, "dec.ln_f")
    if cfg.tie_embeddings:
        # embedding rows have unit variance: d^-1/2 makes logits O(1), and the
        # learned scale starts small so an untrained model predicts near-uniformly
        w = T.transpose(p["emb.tok"]) * (cfg.hidden_size ** -0.5)
        return T.matmul(x, w) * p["out.scale"] + p["out.b"]
    return linear(x, p, "out")


def shift_right(tgt: np.ndarray) -> np.ndarray:
    tgt = np.asarray(tgt)
    out = np.empty_like(tgt)
    out[:, 0] = BOS
    out[:, 1:] = tgt[:, :-1]
    return out


def seq2seq_forward(p: Params, cfg: ModelConfig, src, tgt, memory: MemoryState, reset=None,
                    src_mask=None) -> tuple[Tensor, EncodeResult]:
    """Teacher-forced forward: logits predicting ``tgt`` plus the encode result."""
    enc = encode(p, cfg, src, memory, reset, src_mask)
    logits = decode(p, cfg, shift_right(tgt), enc.encoder_states, src_mask)
    return logits, enc


# -- generation ----------------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass
class BeamResult:
    tokens: list[int]
    score: float
    finished: bool  # False when max_len cut the search before EOS


def beam_search(p: Params, cfg: ModelConfig, src, memory: MemoryState, beam_width: int = 4,
                max_len: int = 32, length_penalty: float = 1.0, reset=None,
                src_mask=None) -> BeamResult:
    """Best hypothesis (EOS stripped) for a single source sequence.

    Hypotheses are ranked by cumulative log-probability during the search and
    by ``logprob / length**length_penalty`` when choosing among finished
    ones. Ties break toward the lexicographically smaller token sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    src = np.atleast_2d(np.asarray(src))
    with T.no_grad():
        enc = encode(p, cfg, src, memory, reset, src_mask)
        states = enc.encoder_states.data
        beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        finished: list[tuple[float, tuple[int, ...]]] = []
        # the decoder input is BOS + hypothesis, so positions cap the length
        for _ in range(min(max_len, cfg.max_positions)):
            dec_in = np.array([(BOS,) + toks for _, toks in beams])
            ctx = Tensor(np.repeat(states, len(beams), axis=0), dtype=states.dtype)
            mask = None if src_mask is None else np.repeat(np.asarray(src_mask), len(beams), axis=0)
            logits = decode(p, cfg, dec_in, ctx, mask).data[:, -1]
            logp = _log_softmax(logits.astype(np.float64))
            cands = [(score + float(logp[b, t]), toks + (t,))
                     for b, (score, toks) in enumerate(beams) for t in range(logp.shape[1])]
            cands.sort(key=lambda c: (-c[0], c[1]))
            beams = []
            for score, toks in cands[:beam_width]:
                (finished if toks[-1] == EOS else beams).append((score, toks))
            if not beams or len(finished) >= beam_width:
                break

    def normalized(c):
        return c[0] / (len(c[1]) ** length_penalty)

    best = min(finished or beams, key=lambda c: (-normalized(c), c[1]))
    toks = list(best[1])
    done = bool(toks) and toks[-1] == EOS
    return BeamResult(toks[:-1] if done else toks, normalized(best), done)
