"""Training and evaluation runs assembled from a RunConfig, with checkpoint state."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (BatchDispatcher, Document, DocumentQueue, StepBatch, filter_documents, load_corpus,
                   synthetic_document, task_segments)
from .evaluation import EvalReport, perplexity
from .memory import MemoryState
from .model import init_params, unique_params
from .tensor import Tensor
from .training import Trainer

EVAL_SEED_OFFSET = 0x5EED  # held-out synthetic documents use a different stream


def _to_segments(rc: RunConfig):
    d, seed = rc.data, rc.train.seed

    def fn(doc: Document):
        return task_segments(d.task, doc, d.context, d.overlap, d.mask_ratio, seed)
    return fn


def make_queue(rc: RunConfig, split: str = "train") -> DocumentQueue:
    d, seed = rc.data, rc.train.seed
    if d.corpus is None:
        s = seed + EVAL_SEED_OFFSET if split == "eval" else seed
        source = lambda i: synthetic_document(s, i, rc.model.vocab_size, d.seg_len, d.segs_per_doc)  # noqa: E731
        return DocumentQueue(source, limit=d.eval_docs if split == "eval" else None)
    docs = filter_documents(load_corpus(d.corpus), d.min_length)
    if not docs:
        raise ValueError(f"corpus {d.corpus} has no documents of length >= {d.min_length}")
    if split == "eval":
        return DocumentQueue(docs, limit=d.eval_docs)
    # training cycles over the corpus; ids stay unique per visit
    return DocumentQueue(lambda i: Document(i, docs[i % len(docs)].tokens))


def make_dispatcher(rc: RunConfig, split: str = "train") -> BatchDispatcher:
    return BatchDispatcher(make_queue(rc, split), rc.train.batch_size, _to_segments(rc))


def eval_batches(rc: RunConfig) -> Iterator[StepBatch]:
    return iter(make_dispatcher(rc, "eval"))


class TrainingRun:
    """A Trainer plus smoothed-loss tracking and (de)serialisable state."""

    def __init__(self, rc: RunConfig):
        self.rc = rc
        T.set_precision(rc.train.precision)
        self.params = init_params(rc.model)
        self.trainer = Trainer(self.params, rc.model, rc.train, make_dispatcher(rc))
        self.smoothed: float | None = None

    @property
    def step(self) -> int:
        return self.trainer.step

    def train_step(self) -> dict | None:
        diag = self.trainer.train_step()
        if diag is None:
            return None
        if math.isfinite(diag.loss):
            s = self.rc.run.smoothing
            self.smoothed = diag.loss if self.smoothed is None else s * self.smoothed + (1 - s) * diag.loss
        rec = {"event": "train", **diag.to_dict(), "smoothed_loss": self.smoothed}
        return rec

    @property
    def nan_streak(self) -> int:
        return self.trainer.nan_streak

    def evaluate(self, memory_enabled: bool = True) -> EvalReport:
        return perplexity(self.params, self.rc.model, eval_batches(self.rc), memory_enabled)

    # -- state ---------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tr = self.trainer
        out: dict[str, np.ndarray] = {}
        for name, t in unique_params(self.params):
            out["param/" + name] = t.data
        for name in tr.opt.m:
            out["adam.m/" + name] = tr.opt.m[name]
            out["adam.v/" + name] = tr.opt.v[name]
        out["memory"] = tr.memory.slots.data
        disp = tr.dispatcher.state_dict()
        out["rng/seed"] = np.array([self.rc.train.seed], dtype=np.float64)
        out["rng/queue_pos"] = np.array([disp["queue_pos"]], dtype=np.float64)
        out["rng/drained"] = np.array([float(disp["drained"])])
        out["rng/lanes"] = np.array(disp["lanes"], dtype=np.float64).reshape(-1, 2)
        smoothed = float("nan") if self.smoothed is None else self.smoothed
        out["state/counters"] = np.array([tr.step, tr.opt.step_count, tr.opt.skipped, tr.nan_streak, smoothed],
                                         dtype=np.float64)
        return out

    def load_state_tensors(self, ts: dict[str, np.ndarray]) -> None:
        tr = self.trainer
        for name, t in unique_params(self.params):
            arr = ts.get("param/" + name)
            if arr is None or arr.shape != t.data.shape:
                raise CheckpointError(f"checkpoint lacks a matching tensor for parameter {name}")
            t.data = arr.astype(t.data.dtype, copy=True)
        tr.opt.m = {k[len("adam.m/"):]: v.copy() for k, v in ts.items() if k.startswith("adam.m/")}
        tr.opt.v = {k[len("adam.v/"):]: v.copy() for k, v in ts.items() if k.startswith("adam.v/")}
        tr.memory = MemoryState(Tensor(ts["memory"].copy(), dtype=ts["memory"].dtype))
        lanes = [(int(a), int(b)) for a, b in ts["rng/lanes"]]
        tr.dispatcher.load_state_dict({"queue_pos": int(ts["rng/queue_pos"][0]),
                                       "drained": bool(ts["rng/drained"][0]), "lanes": lanes})
        step, opt_step, skipped, nan_streak, smoothed = ts["state/counters"].tolist()
        tr.step, tr.opt.step_count, tr.opt.skipped, tr.nan_streak = int(step), int(opt_step), int(skipped), int(nan_streak)
        self.smoothed = None if math.isnan(smoothed) else smoothed

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state_tensors(), self.rc.digest())

    def load(self, path: str | Path) -> None:
        self.load_state_tensors(load_checkpoint(path, self.rc.digest()).tensors)


def load_params(rc: RunConfig, path: str | Path):
    """Model parameters only, checked against the config digest."""
    run = TrainingRun(rc)
    run.load(path)
    return run.params


class MetricsLog:
    """Append-only JSON-lines log, flushed per record."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
