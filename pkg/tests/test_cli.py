import json
import struct

import numpy as np
import pytest

from membart import cli
from membart import training
from membart.checkpoint import (CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                                save_checkpoint)
from membart.config import ConfigError, RunConfig, build_config, load_config, parse_config_text
from membart.model import ModelConfig, count_parameters, init_params
from membart.runner import TrainingRun, read_metrics

TINY = """\
# tiny desk run
model.hidden_size = 16
model.heads = 2
model.memory_size = 4
model.vocab_size = 32
model.max_positions = 8
model.decoder_layers = 1
train.batch_size = 2
train.horizon = 3
train.warmup_steps = 5
train.learning_rate = 0.003
data.context = 4
data.seg_len = 4
data.eval_docs = 8
run.checkpoint_every = 5
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run_cli(*args):
    return cli.main([str(a) for a in args])


# -- config ------------------------------------------------------------------

def test_config_text_parsing():
    vals = parse_config_text("a.b = 1  # trailing\n\n# only comment\nc.d=x, y\n")
    assert vals == {"a.b": "1", "c.d": "x, y"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("no equals sign")


def test_config_types_and_overrides(tiny_cfg):
    rc = load_config(tiny_cfg, {"model.memory_size": 2, "run.variants": "membart, membart_shared",
                                "run.no_history": "yes"})
    assert rc.model.hidden_size == 16 and rc.model.memory_size == 2
    assert rc.train.learning_rate == 0.003
    assert rc.run.variants == ["membart", "membart_shared"] and rc.run.no_history is True
    assert rc.data.corpus is None


@pytest.mark.parametrize("key,value", [("model.nope", "1"), ("nosection", "1"), ("model.hidden_size", "abc"),
                                       ("model.variant", "lstm"), ("run.no_history", "maybe")])
def test_config_errors(key, value):
    with pytest.raises(ConfigError):
        build_config({key: value})


def test_config_round_trips_through_text():
    rc = build_config({"model.memory_size": "3", "bench.turns": "1, 3"})
    again = build_config(parse_config_text(rc.to_text()))
    assert again == rc


def test_digest_is_stable_and_selective(tiny_cfg):
    a, b = load_config(tiny_cfg), load_config(tiny_cfg)
    assert a.digest() == b.digest() and len(a.digest()) == 32
    assert load_config(tiny_cfg, {"train.max_steps": 7, "run.out": "elsewhere"}).digest() == a.digest()
    assert load_config(tiny_cfg, {"model.memory_size": 2}).digest() != a.digest()


def test_validation(tmp_path):
    with pytest.raises(ConfigError, match="corpus"):
        build_config({"data.corpus": str(tmp_path / "missing.txt")}).validate()
    with pytest.raises(ConfigError, match="overlap"):
        build_config({"data.overlap": "16"}).validate()
    with pytest.raises(ConfigError, match="checkpoint"):
        RunConfig().validate(need_checkpoint=True)
    (tmp_path / "c.txt").write_text("hello\n")
    with pytest.raises(ConfigError, match="vocab"):
        build_config({"data.corpus": str(tmp_path / "c.txt")}).validate()


# -- checkpoint format ---------------------------------------------------------

def sample_tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((3, 4)).astype(np.float32), "b/c": rng.standard_normal(5),
            "scalar": np.array(2.5, dtype=np.float32), "empty": np.zeros((0, 3))}


def test_checkpoint_round_trip_bitwise(tmp_path):
    ts = sample_tensors()
    save_checkpoint(tmp_path / "x.mbrt", ts, bytes(range(32)))
    ck = load_checkpoint(tmp_path / "x.mbrt")
    assert ck.digest == bytes(range(32))
    assert list(ck.tensors) == list(ts)
    for k in ts:
        assert ck.tensors[k].dtype == ts[k].dtype and ck.tensors[k].shape == ts[k].shape
        assert ck.tensors[k].tobytes() == ts[k].tobytes()


def test_checkpoint_layout():
    buf = encode_checkpoint({"w": np.array([1.0], dtype=np.float32)}, b"\x07" * 32)
    assert buf[:4] == b"MBRT" and struct.unpack("<I", buf[4:8]) == (1,)
    assert buf[8:40] == b"\x07" * 32
    # u16 name length, name, dtype tag, rank, u64 dim, f32 data, 8-byte checksum
    assert buf[40:42] == b"\x01\x00" and buf[42:43] == b"w" and buf[43:45] == b"\x00\x01"
    assert struct.unpack("<Q", buf[45:53]) == (1,) and struct.unpack("<f", buf[53:57]) == (1.0,)
    assert len(buf) == 57 + 8


def test_corrupted_byte_fails_integrity():
    buf = bytearray(encode_checkpoint(sample_tensors(), bytes(32)))
    buf[60] ^= 0x01
    with pytest.raises(CheckpointError, match="integrity"):
        decode_checkpoint(bytes(buf))


def test_truncated_file_reports_offset():
    buf = encode_checkpoint(sample_tensors(), bytes(32))
    with pytest.raises(CheckpointError, match="truncated.*offset"):
        decode_checkpoint(buf[:70])


@pytest.mark.parametrize("patch,msg", [((0, b"XXXX"), "magic"), ((4, struct.pack("<I", 2)), "version")])
def test_header_mismatch_refused(patch, msg):
    buf = bytearray(encode_checkpoint(sample_tensors(), bytes(32)))
    pos, raw = patch
    buf[pos:pos + len(raw)] = raw
    with pytest.raises(CheckpointError, match=msg):
        decode_checkpoint(bytes(buf))


def test_digest_mismatch_refused():
    buf = encode_checkpoint(sample_tensors(), bytes(32))
    with pytest.raises(CheckpointError, match="digest"):
        decode_checkpoint(buf, expect_digest=b"\x01" * 32)


def test_only_float_tensors():
    with pytest.raises(TypeError):
        encode_checkpoint({"i": np.arange(3)}, bytes(32))


def _default_param_count(d=64, v=256, pos=64, k=8, enc=2, dec=2):
    stream = 2 * d + 4 * (d * d + d) + 2 * d + (8 * d * d + 5 * d)
    dec_layer = 6 * d + 2 * 4 * (d * d + d) + (8 * d * d + 5 * d)
    memory = k * d + 2 * d + (8 * d * d + 5 * d) + (d + 1)
    return v * d + pos * d + 2 * enc * stream + 4 * d + dec * dec_layer + 2 * d + v + 1 + memory


def test_default_checkpoint_under_five_megabytes(tmp_path):
    cfg = ModelConfig()
    assert count_parameters(init_params(cfg)) == _default_param_count()
    rc = RunConfig(model=cfg)
    run = TrainingRun(rc)
    run.train_step()  # materialises the optimiser moments
    path = tmp_path / "default.mbrt"
    run.save(path)
    assert path.stat().st_size < 5 * 1024 * 1024


def test_training_state_round_trip(tiny_cfg, tmp_path):
    rc = load_config(tiny_cfg)
    run = TrainingRun(rc)
    for _ in range(3):
        run.train_step()
    run.save(tmp_path / "s.mbrt")
    other = TrainingRun(rc)
    other.load(tmp_path / "s.mbrt")
    a, b = run.state_tensors(), other.state_tensors()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


# -- commands ------------------------------------------------------------------

def test_steps_zero_writes_initial_checkpoint_only(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "--config", tiny_cfg, "--steps", 0, "--out", out) == 0
    assert (out / "checkpoint.mbrt").exists()
    assert [r["event"] for r in read_metrics(out / "metrics.jsonl")] == ["train_done"]
    ck = load_checkpoint(out / "checkpoint.mbrt")
    assert ck.tensors["state/counters"][0] == 0
    assert not any(k.startswith("adam.") for k in ck.tensors)
    assert "model.memory_size = 4" in (out / "config.txt").read_text()


def _train_records(path):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in read_metrics(path) if r["event"] == "train"]


def test_resume_matches_uninterrupted_run(tiny_cfg, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run_cli("train", "--config", tiny_cfg, "--steps", 12, "--out", full) == 0
    assert run_cli("train", "--config", tiny_cfg, "--steps", 5, "--out", part) == 0
    assert run_cli("train", "--config", tiny_cfg, "--steps", 12, "--out", part,
                   "--checkpoint", part / "checkpoint.mbrt") == 0
    a, b = _train_records(full / "metrics.jsonl"), _train_records(part / "metrics.jsonl")
    assert [r["step"] for r in b] == list(range(1, 13))
    assert a == b
    fa, fb = load_checkpoint(full / "checkpoint.mbrt"), load_checkpoint(part / "checkpoint.mbrt")
    assert all(fa.tensors[k].tobytes() == fb.tensors[k].tobytes() for k in fa.tensors)


def test_nan_losses_abort(tiny_cfg, tmp_path, monkeypatch, capsys):
    def explode(*a, **k):
        raise FloatingPointError("non-finite value in forward pass")
    monkeypatch.setattr(training, "mrbp_step", explode)
    out = tmp_path / "nan"
    assert run_cli("train", "--config", tiny_cfg, "--steps", 10, "--out", out) == 2
    assert "3 consecutive" in capsys.readouterr().err
    assert len(_train_records(out / "metrics.jsonl")) == 3


def test_usage_errors_exit_one(tiny_cfg, tmp_path, capsys):
    assert run_cli("train", "--config", tmp_path / "missing.cfg") == 1
    assert run_cli("train", "--config", tiny_cfg, "--set", "model.bogus=1") == 1
    assert run_cli("train", "--config", tiny_cfg, "--context", 100, "--out", tmp_path / "x") == 1
    assert run_cli("eval", "--config", tiny_cfg, "--out", tmp_path / "x") == 1
    assert run_cli("frobnicate") == 1


def test_locked_run_directory_is_refused(tiny_cfg, tmp_path, capsys):
    from filelock import FileLock
    out = tmp_path / "busy"
    out.mkdir()
    # flock locks belong to the open file, so a second handle contends even in-process
    with FileLock(str(out / "run.lock")):
        assert run_cli("train", "--config", tiny_cfg, "--steps", 0, "--out", out) == 1
    assert "locked" in capsys.readouterr().err
    assert run_cli("train", "--config", tiny_cfg, "--steps", 0, "--out", out) == 0


def test_eval_is_deterministic_and_checks_digest(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run_cli("train", "--config", tiny_cfg, "--steps", 3, "--out", out) == 0
    capsys.readouterr()
    ck = out / "checkpoint.mbrt"
    assert run_cli("eval", "--config", tiny_cfg, "--checkpoint", ck, "--out", out) == 0
    assert run_cli("eval", "--config", tiny_cfg, "--checkpoint", ck, "--out", out) == 0
    first, second = capsys.readouterr().out.strip().splitlines()
    assert json.loads(first) == json.loads(second)
    assert run_cli("eval", "--config", tiny_cfg, "--checkpoint", ck, "--out", out, "--memory-size", 2) == 1
    assert "digest" in capsys.readouterr().err


def test_untrained_perplexity_near_vocab_size(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "u"
    assert run_cli("train", "--config", tiny_cfg, "--steps", 0, "--out", out) == 0
    capsys.readouterr()
    assert run_cli("eval", "--config", tiny_cfg, "--checkpoint", out / "checkpoint.mbrt", "--out", out) == 0
    ppl = json.loads(capsys.readouterr().out)["perplexity"]
    assert abs(ppl - 32) / 32 < 0.05


def test_bench_table(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "b"
    code = run_cli("bench", "--config", tiny_cfg, "--out", out, "--set", "bench.turns=1,2",
                   "--set", "bench.tokens=2,3", "--set", "bench.memory=0,2", "--set", "bench.repeats=3")
    assert code == 0
    lines = (out / "bench.tsv").read_text().strip().splitlines()
    assert all(len(line.split("\t")) == 8 for line in lines)
    one_turn = [line.split("\t") for line in lines[1:] if line.split("\t")[1] == "1" and line.split("\t")[3] == "0"]
    assert len({(r[2], r[4]) for r in one_turn}) == 2  # per N, every mode agrees at T = 1


def test_compare_variants_is_repeatable(tiny_cfg, tmp_path, capsys):
    outs = []
    for name in ("c1", "c2"):
        assert run_cli("compare-variants", "--config", tiny_cfg, "--steps", 4, "--out", tmp_path / name,
                       "--set", "run.variants=membart,membart_shared") == 0
        outs.append(json.loads(capsys.readouterr().out))
    assert outs[0]["final_smoothed_loss"] == outs[1]["final_smoothed_loss"]
    assert (tmp_path / "c1" / "curves.tsv").read_text() == (tmp_path / "c2" / "curves.tsv").read_text()
    header = (tmp_path / "c1" / "curves.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["step", "membart", "membart_shared"]


def test_steps_to_threshold():
    assert cli.steps_to_threshold([1.0, 0.5, 0.04, 0.03], 0.05) == 3
    assert cli.steps_to_threshold([1.0, 0.5], 0.05) is None
