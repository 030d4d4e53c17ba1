"""Perplexity, word-overlap F1, and the attention-cost / latency benchmark."""

from __future__ import annotations

import csv
import gc
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .data import StepBatch
from .layers import count_attention
from .model import BOS, ModelConfig, Params, decode, encode, init_params, initial_memory, seq2seq_forward

MODES = ("stateful", "stateless_full_history", "stateless_truncated")
TSV_COLUMNS = ("mode", "T", "N", "m", "predicted_ops", "measured_ops", "mean_latency_ms", "var")


# -- perplexity and F1 -------------------------------------------------------

@dataclass
class EvalReport:
    perplexity: float
    tokens: int
    nll: float
    by_segment: dict[int, float] = field(default_factory=dict)
    f1: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_segment"] = {str(k): v for k, v in self.by_segment.items()}
        return d


def _token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    mx = x.max(axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(x - mx).sum(axis=-1))
    return lse - np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]


def perplexity(p: Params, cfg: ModelConfig, batches: Iterable[StepBatch], memory_enabled: bool = True) -> EvalReport:
    """exp(total NLL / active target tokens) over a stream of timestep batches.

    With ``memory_enabled`` false every step is run with reset = 1, so no
    history reaches the model.
    """
    total, count = 0.0, 0
    seg_nll: dict[int, float] = {}
    seg_count: dict[int, int] = {}
    memory = None
    with T.no_grad():
        for b in batches:
            if memory is None:
                memory = initial_memory(p, cfg, b.batch_size)
            reset = b.reset if memory_enabled else np.ones_like(b.reset)
            logits, enc = seq2seq_forward(p, cfg, b.src, b.tgt, memory, reset, b.src_mask)
            memory = enc.next_memory
            nll = _token_nll(logits.data, b.tgt) * b.tgt_mask
            total += float(nll.sum())
            count += int(b.tgt_mask.sum())
            for lane in np.flatnonzero(b.active):
                idx = int(b.seg_index[lane])
                seg_nll[idx] = seg_nll.get(idx, 0.0) + float(nll[lane].sum())
                seg_count[idx] = seg_count.get(idx, 0) + int(b.tgt_mask[lane].sum())
    if count == 0:
        raise ValueError("perplexity is undefined with zero active target tokens")
    by_segment = {k: math.exp(seg_nll[k] / seg_count[k]) for k in sorted(seg_nll) if seg_count[k]}
    return EvalReport(math.exp(total / count), count, total, by_segment)


def f1_word_overlap(hypothesis: Sequence, reference: Sequence) -> float:
    """Harmonic mean of multiset precision and recall."""
    if not hypothesis and not reference:
        return 1.0
    if not hypothesis or not reference:
        return 0.0
    common = sum((Counter(hypothesis) & Counter(reference)).values())
    if common == 0:
        return 0.0
    prec = common / len(hypothesis)
    rec = common / len(reference)
    return 2 * prec * rec / (prec + rec)


# -- attention cost ------------------------------------------------------------

@dataclass
class CostModel:
    mode: str
    turns: int
    tokens_per_turn: int
    memory_size: int = 0
    truncation: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.turns < 1 or self.tokens_per_turn < 1 or self.memory_size < 0:
            raise ValueError("turns and tokens_per_turn must be positive, memory_size non-negative")
        if self.mode != "stateful" and self.memory_size:
            raise ValueError("stateless modes carry no memory")
        if self.mode == "stateless_truncated" and (self.truncation is None or self.truncation < 1):
            raise ValueError("truncated mode needs a positive truncation limit")


def attention_op_count(cost: CostModel) -> int:
    """Query-key score products per encoder layer per head over all turns."""
    n, m = cost.tokens_per_turn, cost.memory_size
    turns = range(1, cost.turns + 1)
    if cost.mode == "stateful":
        return cost.turns * (n + m) ** 2
    if cost.mode == "stateless_full_history":
        return sum((t * n) ** 2 for t in turns)
    return sum(min(t * n, cost.truncation) ** 2 for t in turns)


def _turn_inputs(cost: CostModel, t: int, history: np.ndarray) -> np.ndarray:
    """Encoder input at turn t (1-based) given the token history so far."""
    n = cost.tokens_per_turn
    if cost.mode == "stateful":
        return history[:, (t - 1) * n:t * n]
    if cost.mode == "stateless_full_history":
        return history[:, :t * n]
    return history[:, max(0, t * n - cost.truncation):t * n]


def bench_config(cost: CostModel, base: ModelConfig) -> ModelConfig:
    """A model config able to run ``cost``: memory size and positions adjusted."""
    d = base.to_dict()
    d["variant"] = "membart" if cost.mode == "stateful" else "stateless"
    d["memory_size"] = cost.memory_size
    d["max_positions"] = max(base.max_positions, cost.turns * cost.tokens_per_turn)
    return ModelConfig(**d)


def measured_attention_ops(p: Params, cfg: ModelConfig, cost: CostModel, seed: int = 0) -> list[int]:
    """Counted encoder score products per layer, cumulative after each turn.

    Dummy tokens are fed turn by turn; stateless modes re-encode the history
    window each turn, the stateful mode carries memory instead.
    """
    rng = np.random.default_rng(seed)
    history = rng.integers(4, cfg.vocab_size, size=(1, cost.turns * cost.tokens_per_turn))
    memory = initial_memory(p, cfg, 1)
    cumulative = []
    with T.no_grad(), count_attention() as counter:
        for t in range(1, cost.turns + 1):
            enc = encode(p, cfg, _turn_inputs(cost, t, history), memory)
            memory = enc.next_memory
            total = counter.get("enc")
            if total % cfg.encoder_layers:
                raise AssertionError("encoder layers disagree on attention size")
            cumulative.append(total // cfg.encoder_layers)
    return cumulative


def latency_bench(p: Params, cfg: ModelConfig, cost: CostModel, repeats: int = 10,
                  seed: int = 0) -> np.ndarray:
    """Per-turn wall-clock ms, shape [repeats, turns].

    Each turn is one encoder forward plus a single decoder step, on dummy
    tokens.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    history = rng.integers(4, cfg.vocab_size, size=(1, cost.turns * cost.tokens_per_turn))
    out = np.zeros((repeats, cost.turns))
    bos = np.array([[BOS]])
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        with T.no_grad():
            # warm-up pass so first-touch allocation does not land on turn 1
            _run_turns(p, cfg, cost, history, bos, None)
            for r in range(repeats):
                _run_turns(p, cfg, cost, history, bos, out[r])
    finally:
        if gc_was_enabled:
            gc.enable()
    return out


def _run_turns(p, cfg, cost, history, bos, sink) -> None:
    memory = initial_memory(p, cfg, 1)
    for t in range(1, cost.turns + 1):
        x = _turn_inputs(cost, t, history)
        t0 = time.perf_counter()
        enc = encode(p, cfg, x, memory)
        decode(p, cfg, bos, enc.encoder_states)
        if sink is not None:
            sink[t - 1] = (time.perf_counter() - t0) * 1000.0
        memory = enc.next_memory


@dataclass
class SlopeFit:
    slope: float          # ms per turn
    intercept: float
    p_positive: float     # one-sided p-value for slope > 0
    p_nonzero: float      # two-sided p-value for slope != 0
    mean_ms: float

    def drift_fraction(self, turns: int) -> float:
        """Fitted change over the whole run relative to the mean latency."""
        return abs(self.slope) * (turns - 1) / self.mean_ms


def latency_slope(samples: np.ndarray) -> SlopeFit:
    """Least-squares fit of latency against turn index over all repeats."""
    repeats, turns = samples.shape
    x = np.tile(np.arange(1, turns + 1), repeats)
    fit = stats.linregress(x, samples.ravel())
    p_two = 1.0 if np.isnan(fit.pvalue) else float(fit.pvalue)
    p_pos = p_two / 2 if fit.slope > 0 else 1.0 - p_two / 2
    return SlopeFit(float(fit.slope), float(fit.intercept), p_pos, p_two, float(samples.mean()))


@dataclass
class BenchRow:
    mode: str
    T: int
    N: int
    m: int
    predicted_ops: int
    measured_ops: int
    mean_latency_ms: float = float("nan")
    var: float = float("nan")


def bench_grid(base: ModelConfig, turns: Sequence[int], tokens: Sequence[int], memory: Sequence[int],
               truncation: int = 64, repeats: int = 0, seed: int = 0) -> list[BenchRow]:
    """Predicted vs counted attention ops (and optionally latency) over a grid.

    Each (mode, N, m) runs once at the largest T; smaller T read the
    cumulative count after that many turns.
    """
    rows = []
    t_max = max(turns)
    for mode in MODES:
        for n in tokens:
            for m in (memory if mode == "stateful" else [0]):
                top = CostModel(mode, t_max, n, m, truncation if mode == "stateless_truncated" else None)
                cfg = bench_config(top, base)
                p = init_params(cfg)
                counts = measured_attention_ops(p, cfg, top, seed)
                lat = latency_bench(p, cfg, top, repeats, seed) if repeats else None
                for t in sorted(turns):
                    cost = CostModel(mode, t, n, m, top.truncation)
                    row = BenchRow(mode, t, n, m, attention_op_count(cost), counts[t - 1])
                    if lat is not None:
                        per_turn = lat[:, :t].mean(axis=1)
                        row.mean_latency_ms = float(per_turn.mean())
                        row.var = float(per_turn.var())
                    rows.append(row)
    return rows


def write_tsv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TSV_COLUMNS)
        for r in rows:
            w.writerow([r.mode, r.T, r.N, r.m, r.predicted_ops, r.measured_ops,
                        f"{r.mean_latency_ms:.4f}", f"{r.var:.6f}"])
