"""Memory-replay back-propagation, its unrolled oracle, and the optimiser."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchDispatcher, StepBatch
from .memory import MemoryState
from .model import ModelConfig, Params, encode, initial_memory, seq2seq_forward, unique_params, zero_grads
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    weight_decay: float = 0.01
    dropout: float = 0.0
    horizon: int = 2
    batch_size: int = 16
    max_steps: int = 2000
    precision: str = "f32"
    seed: int = 0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; runs are deterministic with dropout 0.0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Rollout:
    steps: list[StepBatch]
    memory: MemoryState

    def __post_init__(self):
        if not self.steps:
            raise ValueError("rollout needs at least one step")

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def normalizer(self) -> float:
        return float(max(1, sum(s.n_target_tokens for s in self.steps)))


@dataclass
class TrainDiagnostics:
    step: int
    loss: float
    memory_grad_norm: float
    gate_mean: float
    lr: float
    wall_ms: float
    tokens: int = 0
    skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepResult:
    grads: dict[str, np.ndarray]
    loss: float
    memory_grad_norm: float
    gate_mean: float
    peak_tape_nodes: int
    memories: list[np.ndarray] = field(default_factory=list)

    @property
    def final_memory(self) -> np.ndarray:
        return self.memories[-1]


def step_loss(p: Params, cfg: ModelConfig, batch: StepBatch, memory: Tensor, normalizer: float):
    """Token cross-entropy for one timestep, scaled by 1/normalizer."""
    logits, enc = seq2seq_forward(p, cfg, batch.src, batch.tgt, MemoryState(memory), batch.reset,
                                  batch.src_mask)
    loss = T.cross_entropy_sum(logits, batch.tgt, batch.tgt_mask, scale=1.0 / normalizer)
    return loss, enc


def _collect_grads(p: Params) -> dict[str, np.ndarray]:
    return {name: (np.zeros_like(t.data) if t.grad is None else t.grad) for name, t in unique_params(p)}


def _gate_mean(enc) -> float:
    return float(enc.gate_values.data.mean()) if enc.gate_values is not None else float("nan")


def _mean_gate(gates: list[float]) -> float:
    finite = [g for g in gates if not math.isnan(g)]
    return float(np.mean(finite)) if finite else float("nan")


def _check_rollout(rollout: Rollout, memories: list[np.ndarray] | None) -> None:
    if memories is None:
        return
    if len(memories) < 1 or not np.array_equal(memories[0], rollout.memory.slots.data):
        raise ValueError("rollout memories are inconsistent with the rollout's initial memory")


def mrbp_step(rollout: Rollout, p: Params, cfg: ModelConfig, memories: list[np.ndarray] | None = None) -> StepResult:
    """Gradients over a rollout with one step's activations alive at a time.

    A forward sweep without recording stores the memory entering each step.
    The backward sweep walks from the newest step to the oldest, recomputing
    each step with recording and back-propagating its loss together with the
    memory gradient carried from the step after it.
    """
    _check_rollout(rollout, memories)
    zero_grads(p)
    norm = rollout.normalizer()
    horizon = rollout.horizon
    replay = [rollout.memory.slots.data]
    with T.no_grad():
        for batch in rollout.steps[:-1]:
            enc = encode(p, cfg, batch.src, MemoryState(Tensor(replay[-1], dtype=replay[-1].dtype)),
                         batch.reset, batch.src_mask)
            replay.append(enc.next_memory.slots.data)

    grad_next: np.ndarray | None = None
    total = 0.0
    peak = 0
    mem_norm = 0.0
    gates = []
    final_memory = None
    tape = T.get_tape()
    for i in reversed(range(horizon)):
        m_in = Tensor(replay[i], requires_grad=True, dtype=replay[i].dtype)
        loss, enc = step_loss(p, cfg, rollout.steps[i], m_in, norm)
        peak = max(peak, len(tape))
        m_out = enc.next_memory.slots
        if i == horizon - 1:
            final_memory = m_out.data
        total += float(loss.data)
        gates.append(_gate_mean(enc))
        seeds = None
        passthrough = None
        if grad_next is not None:
            if i == 0:
                mem_norm = float(np.sqrt(np.sum(np.square(grad_next, dtype=np.float64))))
            if m_out is m_in:
                passthrough = grad_next
            elif m_out.requires_grad:
                seeds = {m_out: grad_next}
        (g_in,) = T.backward(loss, seeds, capture=[m_in])
        g_in = np.zeros_like(m_in.data) if g_in is None else g_in
        if passthrough is not None:
            g_in = g_in + passthrough
        grad_next = g_in

    memories = replay[1:] + [final_memory]
    return StepResult(_collect_grads(p), total, mem_norm, _mean_gate(gates),
                      peak, memories)


def unrolled_bptt_step(rollout: Rollout, p: Params, cfg: ModelConfig, detach_between_steps: bool = False) -> StepResult:
    """Plain back-propagation through one graph spanning the whole rollout."""
    zero_grads(p)
    norm = rollout.normalizer()
    tape = T.get_tape()
    m = Tensor(rollout.memory.slots.data, requires_grad=True, dtype=rollout.memory.slots.data.dtype)
    losses = []
    produced = []
    gates = []
    for batch in rollout.steps:
        loss, enc = step_loss(p, cfg, batch, m, norm)
        losses.append(loss)
        gates.append(_gate_mean(enc))
        produced.append(enc.next_memory.slots)
        m = enc.next_memory.slots
        if detach_between_steps:
            m = m.detach(requires_grad=True)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    peak = len(tape)
    mem_norm = 0.0
    if len(produced) > 1:
        (g_first,) = T.backward(total, capture=[produced[0]])
        if g_first is not None:
            mem_norm = float(np.sqrt(np.sum(np.square(g_first, dtype=np.float64))))
    else:
        T.backward(total)
    return StepResult(_collect_grads(p), float(total.data), mem_norm,
                      _mean_gate(gates), peak,
                      [t.data for t in produced])


def memory_gradient_norm(result: StepResult) -> float:
    return result.memory_grad_norm


# -- optimiser -----------------------------------------------------------

def learning_rate(step: int, base: float, warmup: int) -> float:
    """Linear warm-up to ``base`` then inverse-square-root decay (steps count from 1)."""
    if warmup <= 0:
        return base
    if step < warmup:
        return base * step / warmup
    return base * math.sqrt(warmup / step)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.skipped = 0

    def update(self, p: Params, grads: dict[str, np.ndarray], lr: float | None = None) -> bool:
        """Apply one update in place; returns False (and skips) on non-finite gradients."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        lr = learning_rate(t, c.learning_rate, c.warmup_steps) if lr is None else lr
        if c.clip_norm and c.clip_norm > 0:
            total = global_norm(grads)
            if total > c.clip_norm:
                scale = c.clip_norm / (total + 1e-6)
                grads = {k: g * scale for k, g in grads.items()}
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, param in unique_params(p):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            data = param.data * (1.0 - lr * c.weight_decay)
            data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            param.data = data.astype(param.data.dtype, copy=False)
        return True


def optimizer_update(p: Params, grads: dict[str, np.ndarray], opt: AdamW) -> bool:
    return opt.update(p, grads)


# -- training loop -------------------------------------------------------

class Trainer:
    """Dispatcher -> rollout -> memory-replay step -> AdamW, carrying memory between rollouts."""

    def __init__(self, params: Params, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 dispatcher: BatchDispatcher):
        self.p = params
        self.cfg = model_cfg
        self.tcfg = train_cfg
        self.dispatcher = dispatcher
        self.opt = AdamW(train_cfg)
        self.memory = initial_memory(params, model_cfg, dispatcher.batch_size)
        self.step = 0
        self.nan_streak = 0

    def next_rollout(self) -> Rollout | None:
        steps = []
        for _ in range(self.tcfg.horizon):
            batch = self.dispatcher.next()
            if batch is None:
                break
            steps.append(batch)
        if not steps:
            return None
        return Rollout(steps, self.memory)

    def train_step(self) -> TrainDiagnostics | None:
        rollout = self.next_rollout()
        if rollout is None:
            return None
        t0 = time.perf_counter()
        self.step += 1
        try:
            res = mrbp_step(rollout, self.p, self.cfg)
            loss, grads = res.loss, res.grads
        except FloatingPointError:
            res, loss, grads = None, float("nan"), None
        lr = learning_rate(self.opt.step_count + 1, self.tcfg.learning_rate, self.tcfg.warmup_steps)
        if res is None or not math.isfinite(loss):
            self.nan_streak += 1
            self.opt.skipped += 1
        else:
            self.nan_streak = 0
            self.opt.update(self.p, grads)
            self.memory = MemoryState(Tensor(res.final_memory, dtype=res.final_memory.dtype))
        tokens = sum(s.n_target_tokens for s in rollout.steps)
        return TrainDiagnostics(
            step=self.step,
            loss=loss,
            memory_grad_norm=res.memory_grad_norm if res else float("nan"),
            gate_mean=res.gate_mean if res else float("nan"),
            lr=lr,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
            tokens=tokens,
            skipped=self.opt.skipped,
        )
