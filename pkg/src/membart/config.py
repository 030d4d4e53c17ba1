"""Run configuration: dataclass sections, ``key = value`` files, and the config digest.

A config file holds one ``section.field = value`` per line; ``#`` starts a
comment. Lists are comma-separated. Command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import BYTE_VOCAB, TASKS
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    task: str = "recall"
    corpus: str | None = None  # None: synthetic uniform-token documents
    context: int = 16          # segment window
    overlap: int = 0
    seg_len: int = 16
    segs_per_doc: int = 3
    mask_ratio: float = 0.3
    min_length: int = 0
    eval_docs: int = 256


@dataclass
class RunOptions:
    out: str = "runs/default"
    checkpoint: str | None = None
    checkpoint_every: int = 100
    smoothing: float = 0.98
    no_history: bool = False
    variants: list[str] = field(default_factory=lambda: ["membart", "memformer_insert", "membart_shared"])
    threshold: float = 0.05


@dataclass
class BenchConfig:
    turns: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    tokens: list[int] = field(default_factory=lambda: [8, 16])
    memory: list[int] = field(default_factory=lambda: [0, 4])
    truncation: int = 64
    repeats: int = 10


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "run": RunOptions, "bench": BenchConfig}
# sections and fields that change the trained function; output paths and step budgets do not
_DIGEST_SKIP = {"train.max_steps"}
_DIGEST_SECTIONS = ("model", "train", "data")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunOptions = field(default_factory=RunOptions)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for sec in SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = getattr(getattr(self, sec), f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())

    def digest(self) -> bytes:
        lines = [f"{k} = {_format(v)}" for k, v in self.flat().items()
                 if k.split(".")[0] in _DIGEST_SECTIONS and k not in _DIGEST_SKIP]
        return hashlib.sha256("\n".join(lines).encode()).digest()

    def validate(self, need_checkpoint: bool = False) -> None:
        d = self.data
        if d.task not in TASKS:
            raise ConfigError(f"unknown task {d.task!r}; expected one of {', '.join(TASKS)}")
        if not 0 <= d.overlap < d.context:
            raise ConfigError("data.overlap must satisfy 0 <= overlap < context")
        if d.context > self.model.max_positions:
            raise ConfigError(f"data.context {d.context} exceeds model.max_positions {self.model.max_positions}")
        if d.corpus is not None:
            if not Path(d.corpus).exists():
                raise ConfigError(f"corpus path {d.corpus} does not exist")
            if self.model.vocab_size < BYTE_VOCAB:
                raise ConfigError(f"byte corpora need model.vocab_size >= {BYTE_VOCAB}")
        elif d.seg_len > d.context:
            raise ConfigError("data.seg_len must not exceed data.context")
        if need_checkpoint and (self.run.checkpoint is None or not Path(self.run.checkpoint).exists()):
            raise ConfigError(f"checkpoint {self.run.checkpoint} does not exist")
        for v in self.run.variants:
            if v not in ("membart", "memformer_insert", "memformer_rezero", "membart_shared"):
                raise ConfigError(f"run.variants: {v!r} is not a memory variant")


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse(value: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)][0]
        return None if value.lower() in ("none", "") else _parse(value, inner)
    if origin is list:
        return [_parse(x.strip(), args[0]) for x in value.split(",") if x.strip()]
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if tp is int:
        return int(value, 0)
    if tp is float:
        return float(value)
    return value


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(values: dict[str, str] | None = None, base: RunConfig | None = None) -> RunConfig:
    """Apply dotted ``section.field`` string values on top of ``base``."""
    cfg = base or RunConfig()
    sections = {sec: dataclasses.asdict(getattr(cfg, sec)) for sec in SECTIONS}
    for key, value in (values or {}).items():
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(SECTIONS[sec])
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            sections[sec][name] = _parse(value, types[name]) if isinstance(value, str) else value
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    try:
        return RunConfig(**{sec: SECTIONS[sec](**vals) for sec, vals in sections.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    values.update(overrides or {})
    return build_config(values)
