"""Command-line entry points: train, eval, bench, compare-variants.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluation import bench_grid, write_tsv
from .runner import MetricsLog, TrainingRun

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
NAN_ABORT = 3
CHECKPOINT_NAME = "checkpoint.mbrt"


class RunFailure(RuntimeError):
    pass


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--task", choices=["recall", "denoise", "lm", "copy"])
    p.add_argument("--variant", choices=["membart", "memformer_insert", "memformer_rezero", "membart_shared",
                                         "stateless"])
    p.add_argument("--memory-size", type=int)
    p.add_argument("--context", type=int, help="segment window in tokens")
    p.add_argument("--horizon", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="checkpoint to resume from or evaluate")
    p.add_argument("--out", help="run directory")
    p.add_argument("--no-history", action="store_true", help="reset memory every step when evaluating")
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set model.hidden_size=32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="membart", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train with memory-replay back-propagation"),
                        ("eval", "perplexity of a checkpoint"),
                        ("bench", "attention-op counts and latency over a grid"),
                        ("compare-variants", "recall loss curves for several memory variants")):
        _add_shared(sub.add_parser(name, help=help_))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    over: dict[str, object] = {}
    flag_keys = {"task": "data.task", "variant": "model.variant", "memory_size": "model.memory_size",
                 "context": "data.context", "horizon": "train.horizon", "steps": "train.max_steps",
                 "checkpoint": "run.checkpoint", "out": "run.out", "precision": "train.precision"}
    for flag, key in flag_keys.items():
        v = getattr(args, flag)
        if v is not None:
            over[key] = v
    if args.seed is not None:
        over["model.seed"] = over["train.seed"] = args.seed
    if args.no_history:
        over["run.no_history"] = True
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    return load_config(args.config, over)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _prepare_out(rc: RunConfig) -> Path:
    out = Path(rc.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RunFailure(f"cannot create run directory {out}: {e}") from None
    return out


def _locked(out: Path) -> FileLock:
    lock = FileLock(str(out / "run.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"run directory {out} is locked by another process") from None
    return lock


# -- commands --------------------------------------------------------------

def cmd_train(rc: RunConfig) -> int:
    rc.validate()
    out = _prepare_out(rc)
    lock = _locked(out)
    try:
        (out / "config.txt").write_text(rc.to_text(), encoding="utf-8")
        run = TrainingRun(rc)
        if rc.run.checkpoint is not None and Path(rc.run.checkpoint).exists():
            run.load(rc.run.checkpoint)
        ckpt = out / CHECKPOINT_NAME
        with MetricsLog(out / "metrics.jsonl") as log:
            if run.step == 0:
                run.save(ckpt)
            while run.step < rc.train.max_steps:
                rec = run.train_step()
                if rec is None:
                    break
                log.write(rec)
                if run.nan_streak >= NAN_ABORT:
                    run.save(out / "failed.mbrt")
                    raise RunFailure(f"loss was non-finite for {NAN_ABORT} consecutive steps at step {run.step} "
                                     f"(lr {rec['lr']:.3g}); state saved to {out / 'failed.mbrt'}")
                if rc.run.checkpoint_every and run.step % rc.run.checkpoint_every == 0:
                    run.save(ckpt)
            run.save(ckpt)
            summary = {"event": "train_done", "step": run.step, "smoothed_loss": run.smoothed,
                       "checkpoint": str(ckpt)}
            log.write(summary)
        _emit(summary)
        return EXIT_OK
    finally:
        lock.release()


def cmd_eval(rc: RunConfig) -> int:
    rc.validate(need_checkpoint=True)
    head = load_checkpoint(rc.run.checkpoint)
    if head.digest != rc.digest():
        raise ConfigError(f"checkpoint {rc.run.checkpoint} was written for a different config:\n"
                          f"  checkpoint digest {head.digest.hex()}\n  config digest     {rc.digest().hex()}")
    out = _prepare_out(rc)
    run = TrainingRun(rc)
    run.load_state_tensors(head.tensors)
    report = run.evaluate(memory_enabled=not rc.run.no_history)
    rec = {"event": "eval", "checkpoint": rc.run.checkpoint, "no_history": rc.run.no_history, **report.to_dict()}
    with MetricsLog(out / "metrics.jsonl") as log:
        log.write(rec)
    _emit(rec)
    return EXIT_OK


def cmd_bench(rc: RunConfig) -> int:
    b = rc.bench
    if b.repeats and b.repeats < 3:
        raise ConfigError("bench.repeats must be 0 (counts only) or >= 3")
    out = _prepare_out(rc)
    T.set_precision(rc.train.precision)
    rows = bench_grid(rc.model, b.turns, b.tokens, b.memory, b.truncation, b.repeats, rc.train.seed)
    path = out / "bench.tsv"
    write_tsv(rows, path)
    print(path.read_text(), end="")
    mismatched = [r for r in rows if r.predicted_ops != r.measured_ops]
    with MetricsLog(out / "metrics.jsonl") as log:
        log.write({"event": "bench", "cells": len(rows), "mismatched": len(mismatched), "table": str(path)})
    if mismatched:
        raise RunFailure(f"{len(mismatched)} grid cells disagree with the closed form")
    return EXIT_OK


def steps_to_threshold(curve: list[float], threshold: float) -> int | None:
    for i, v in enumerate(curve, 1):
        if v is not None and v < threshold:
            return i
    return None


def cmd_compare_variants(rc: RunConfig) -> int:
    rc.validate()
    out = _prepare_out(rc)
    lock = _locked(out)
    try:
        curves: dict[str, list[float]] = {}
        with MetricsLog(out / "metrics.jsonl") as log:
            for variant in rc.run.variants:
                vrc = dataclasses.replace(rc, model=dataclasses.replace(rc.model, variant=variant))
                run = TrainingRun(vrc)
                curve = []
                while run.step < rc.train.max_steps:
                    rec = run.train_step()
                    if rec is None:
                        break
                    if run.nan_streak >= NAN_ABORT:
                        raise RunFailure(f"{variant}: non-finite loss for {NAN_ABORT} consecutive steps")
                    curve.append(rec["smoothed_loss"])
                    log.write({"variant": variant, **rec})
                curves[variant] = curve
        n = max(len(c) for c in curves.values())
        with open(out / "curves.tsv", "w", encoding="utf-8") as fh:
            fh.write("step\t" + "\t".join(curves) + "\n")
            for i in range(n):
                vals = [f"{c[i]:.6f}" if i < len(c) and c[i] is not None else "" for c in curves.values()]
                fh.write(f"{i + 1}\t" + "\t".join(vals) + "\n")
        summary = {"event": "compare_done", "threshold": rc.run.threshold,
                   "steps_to_threshold": {v: steps_to_threshold(c, rc.run.threshold) for v, c in curves.items()},
                   "final_smoothed_loss": {v: (c[-1] if c else None) for v, c in curves.items()},
                   "curves": str(out / "curves.tsv")}
        _emit(summary)
        return EXIT_OK
    finally:
        lock.release()


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "compare-variants": cmd_compare_variants}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        rc = config_from_args(args)
        return COMMANDS[args.command](rc)
    except (ConfigError, CheckpointError) as e:
        print(f"membart {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RunFailure, OSError, FloatingPointError) as e:
        print(f"membart {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        T.set_precision("f32")


if __name__ == "__main__":
    sys.exit(main())
