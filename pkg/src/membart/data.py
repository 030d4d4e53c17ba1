"""Segmentation, denoising masks, recall pairs and the temporal batch dispatcher."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import MASK, N_SPECIAL, PAD

TASKS = ("recall", "denoise", "lm", "copy")
BYTE_VOCAB = 256 + N_SPECIAL


@dataclass
class Document:
    id: int
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size == 0:
            raise ValueError(f"document {self.id} is empty")


@dataclass
class Segment:
    source: np.ndarray
    target: np.ndarray
    index: int
    is_first: bool
    doc_id: int = -1


@dataclass
class StepBatch:
    src: np.ndarray        # [B, n] int
    tgt: np.ndarray        # [B, m] int
    reset: np.ndarray      # [B] 0/1
    src_mask: np.ndarray   # [B, n] bool, True = real token
    tgt_mask: np.ndarray   # [B, m] bool, True = loss-bearing
    active: np.ndarray     # [B] bool
    doc_ids: np.ndarray    # [B], -1 for inactive lanes
    seg_index: np.ndarray  # [B], -1 for inactive lanes

    @property
    def batch_size(self) -> int:
        return self.src.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


# -- segmentation and masking ----------------------------------------------

def segment_document(doc: Document, window: int = 512, overlap: int = 128) -> list[Segment]:
    if window < 1 or not 0 <= overlap < window:
        raise ValueError(f"need 0 <= overlap < window, got window={window} overlap={overlap}")
    stride = window - overlap
    toks = doc.tokens
    segs = []
    start = 0
    while True:
        piece = toks[start:start + window]
        segs.append(Segment(piece, piece, len(segs), len(segs) == 0, doc.id))
        if start + window >= len(toks):
            break
        start += stride
    return segs


def filter_documents(docs: Iterable[Document], min_length: int) -> list[Document]:
    return [d for d in docs if len(d.tokens) >= min_length]


def mask_rng(seed: int, doc_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, doc_id & 0xFFFFFFFF, index])


def apply_denoising_mask(seg: Segment, ratio: float = 0.3, rng: np.random.Generator | None = None) -> Segment:
    """Replace floor(ratio * len) distinct positions with the mask id."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must be in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    n = len(seg.target)
    count = math.floor(ratio * n)
    src = np.array(seg.target, copy=True)
    if count:
        src[rng.choice(n, size=count, replace=False)] = MASK
    return Segment(src, seg.target, seg.index, seg.is_first, seg.doc_id)


def text_recall_pairs(segments: Sequence[Segment]) -> list[tuple[np.ndarray, np.ndarray]]:
    """(encoder input x_t, decoder target x_{t-1}) for t >= 1."""
    if len(segments) < 2:
        warnings.warn("document has a single segment; it yields no recall pairs", stacklevel=2)
    return [(segments[t].source, segments[t - 1].target) for t in range(1, len(segments))]


def task_segments(task: str, doc: Document, window: int, overlap: int = 0, mask_ratio: float = 0.3,
                  seed: int = 0) -> list[Segment]:
    """Per-timestep (source, target) items for one document under a task.

    recall: source x_t, target x_{t-1} (empty at t=0, so no loss there).
    denoise: source is x_t with a denoising mask, target x_t.
    copy: source and target both x_t.
    lm: source is the first half of x_t, target the second half.
    """
    segs = segment_document(doc, window, overlap)
    empty = np.zeros(0, dtype=np.int64)
    if task == "recall":
        return [Segment(s.source, segs[i - 1].target if i else empty, i, i == 0, doc.id)
                for i, s in enumerate(segs)]
    if task == "denoise":
        return [apply_denoising_mask(s, mask_ratio, mask_rng(seed, doc.id, i)) for i, s in enumerate(segs)]
    if task == "copy":
        return segs
    if task == "lm":
        out = []
        for s in segs:
            half = max(1, len(s.target) // 2)
            out.append(Segment(s.target[:half], s.target[half:], s.index, s.is_first, doc.id))
        return out
    raise ValueError(f"unknown task {task!r}")


# -- corpora -------------------------------------------------------------

def synthetic_document(seed: int, doc_id: int, vocab: int, seg_len: int, segs_per_doc: int) -> Document:
    if vocab < N_SPECIAL + 1:
        raise ValueError(f"vocab must exceed the {N_SPECIAL} reserved ids")
    rng = np.random.default_rng([seed, doc_id])
    return Document(doc_id, rng.integers(N_SPECIAL, vocab, size=seg_len * segs_per_doc))


def synthetic_copy_stream(vocab: int, seg_len: int, segs_per_doc: int, seed: int = 0,
                          n_docs: int | None = None):
    """Documents of uniformly random tokens; document i depends only on (seed, i)."""
    i = 0
    while n_docs is None or i < n_docs:
        yield synthetic_document(seed, i, vocab, seg_len, segs_per_doc)
        i += 1


def encode_bytes(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else text
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64) + N_SPECIAL


def decode_bytes(ids: Iterable[int]) -> bytes:
    return bytes(int(i) - N_SPECIAL for i in ids if int(i) >= N_SPECIAL)


def load_corpus(path: str | Path) -> list[Document]:
    """Documents from a directory of .txt files, a manifest, or a line-per-document file.

    A file whose every non-empty line names an existing path is treated as a
    manifest.
    """
    path = Path(path)
    if path.is_dir():
        texts = [f.read_bytes() for f in sorted(path.glob("*.txt"))]
    else:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        targets = [(path.parent / ln.strip()) for ln in lines]
        if lines and all(t.exists() for t in targets):
            docs: list[Document] = []
            for t in targets:
                docs.extend(load_corpus(t))
            return [Document(i, d.tokens) for i, d in enumerate(docs)]
        texts = [ln.encode("utf-8") for ln in lines]
    return [Document(i, encode_bytes(t)) for i, t in enumerate(texts) if t]


# -- dispatcher ------------------------------------------------------------

class DocumentQueue:
    """Shared queue of documents addressed by position, so it can be checkpointed.

    ``source`` is either a sequence of documents or a function from position
    to document (returning None once exhausted); ``limit`` caps the length.
    """

    def __init__(self, source: Sequence[Document] | Callable[[int], Document | None],
                 limit: int | None = None):
        self.source = source
        self.limit = limit
        self.pos = 0

    def get(self, i: int) -> Document | None:
        if self.limit is not None and i >= self.limit:
            return None
        if callable(self.source):
            return self.source(i)
        return self.source[i] if i < len(self.source) else None

    def pop(self) -> tuple[int, Document] | None:
        doc = self.get(self.pos)
        if doc is None:
            return None
        self.pos += 1
        return self.pos - 1, doc


@dataclass
class Lane:
    queue_index: int = -1
    segments: list[Segment] = field(default_factory=list)
    cursor: int = 0

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.segments)


class BatchDispatcher:
    """Synchronised per-lane agents sharing one document queue.

    Each call to ``next`` advances every lane by one segment. A lane that has
    finished its document pops the next one and flags reset on its first
    segment; once the queue is empty, finished lanes emit padded inactive
    steps until every lane has drained.
    """

    def __init__(self, queue: DocumentQueue, batch_size: int, to_segments: Callable[[Document], list[Segment]]):
        self.queue = queue
        self.batch_size = batch_size
        self.to_segments = to_segments
        self.lanes = [Lane() for _ in range(batch_size)]
        self.drained = False

    def _refill(self, lane: Lane) -> None:
        popped = self.queue.pop()
        if popped is None:
            lane.queue_index, lane.segments, lane.cursor = -1, [], 0
            return
        qi, doc = popped
        lane.queue_index, lane.segments, lane.cursor = qi, self.to_segments(doc), 0

    def next(self) -> StepBatch | None:
        if self.drained:
            return None
        items: list[Segment | None] = []
        for lane in self.lanes:
            if lane.done:
                self._refill(lane)
            items.append(None if lane.done else lane.segments[lane.cursor])
        if all(it is None for it in items):
            self.drained = True
            return None
        for lane, it in zip(self.lanes, items):
            if it is not None:
                lane.cursor += 1
        return collate(items)

    def __iter__(self):
        while (batch := self.next()) is not None:
            yield batch

    def state_dict(self) -> dict:
        return {
            "queue_pos": self.queue.pos,
            "lanes": [(lane.queue_index, lane.cursor) for lane in self.lanes],
            "drained": self.drained,
        }

    def load_state_dict(self, state: dict) -> None:
        self.queue.pos = int(state["queue_pos"])
        self.drained = bool(state["drained"])
        for lane, (qi, cursor) in zip(self.lanes, state["lanes"]):
            qi, cursor = int(qi), int(cursor)
            doc = self.queue.get(qi) if qi >= 0 else None
            lane.queue_index = qi if doc is not None else -1
            lane.segments = self.to_segments(doc) if doc is not None else []
            lane.cursor = cursor


def collate(items: Sequence[Segment | None]) -> StepBatch:
    b = len(items)
    n = max([len(it.source) for it in items if it is not None] + [1])
    m = max([len(it.target) for it in items if it is not None] + [1])
    src = np.full((b, n), PAD, dtype=np.int64)
    tgt = np.full((b, m), PAD, dtype=np.int64)
    src_mask = np.zeros((b, n), dtype=bool)
    tgt_mask = np.zeros((b, m), dtype=bool)
    reset = np.zeros(b)
    active = np.zeros(b, dtype=bool)
    doc_ids = np.full(b, -1, dtype=np.int64)
    seg_index = np.full(b, -1, dtype=np.int64)
    for i, it in enumerate(items):
        if it is None:
            continue
        src[i, :len(it.source)] = it.source
        src_mask[i, :len(it.source)] = True
        tgt[i, :len(it.target)] = it.target
        tgt_mask[i, :len(it.target)] = True
        reset[i] = 1.0 if it.is_first else 0.0
        active[i] = True
        doc_ids[i] = it.doc_id
        seg_index[i] = it.index
    return StepBatch(src, tgt, reset, src_mask, tgt_mask, active, doc_ids, seg_index)
