import json
from pathlib import Path

import pytest

from padsd.cli import main

SMALL = {
    "task": {"vocab_size": 4, "order": 1, "perturbation": 0.5, "n_contexts": 60, "context_len": 2,
             "task": {"kind": "checksum"}, "eos_mass": 0.05},
    "generation": {"max_len": 12},
    "gamma": 4,
    "label": {"n_rollouts": 8, "max_steps": 12},
    "train": {"epochs": 8, "d_u": 8, "d_v": 4, "d_f": 8},
    "bench": {"n_contexts": 30, "sigmas": [0.7, 0.3]},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def files(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()
            and not p.name.endswith(".timing.json")}


def test_synth_is_byte_identical(tmp_path, config):
    assert run("synth", "--config", config, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", config, "--out", tmp_path / "b") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_seed_changes_task(tmp_path, config):
    run("synth", "--config", config, "--out", tmp_path / "a")
    run("synth", "--config", config, "--out", tmp_path / "b", "--seed", 1)
    a = json.loads((tmp_path / "a" / "task.json").read_text())
    b = json.loads((tmp_path / "b" / "task.json").read_text())
    assert a["spec"]["seed"] == 0 and b["spec"]["seed"] == 1
    assert a["header"]["config_digest"] != b["header"]["config_digest"]


def test_invalid_vocab_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"task": {"vocab_size": 1}}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "vocab_size" in capsys.readouterr().err


def audit_rows(path: Path) -> list[str]:
    return path.read_text().splitlines()[1:]


def test_pad_sigma_zero_matches_sd(tmp_path, config):
    out = tmp_path / "o"
    run("synth", "--config", config, "--out", out)
    assert run("run", "--config", config, "--out", out, "--decoder", "sd") == 0
    assert run("run", "--config", config, "--out", out, "--decoder", "pad", "--sigma", 0, "--oracle") == 0
    reports = out / "reports"
    assert audit_rows(reports / "sd.audit.jsonl") == audit_rows(reports / "pad(sigma=0.00).audit.jsonl")
    sd = json.loads((reports / "sd.json").read_text())["report"]
    pad = json.loads((reports / "pad(sigma=0.00).json").read_text())["report"]
    for key in ("eta", "tau", "utility", "tokens", "blocks", "rejections", "sim_cost"):
        assert sd[key] == pad[key]
    assert pad["overrides"] == 0


def test_pad_without_classifier_errors(tmp_path, config, capsys):
    out = tmp_path / "o"
    run("synth", "--config", config, "--out", out)
    assert run("run", "--config", config, "--out", out, "--decoder", "pad") == 2
    assert "classifier" in capsys.readouterr().err


def test_schema_mismatch(tmp_path, config, capsys):
    out = tmp_path / "o"
    run("synth", "--config", config, "--out", out)
    # a task bundle is not a label file
    (out / "fake.jsonl").write_text((out / "task.json").read_text().replace("\n", " ") + "\n")
    assert run("train", "--config", config, "--out", out, "--dataset", out / "fake.jsonl") == 2
    assert "schema" in capsys.readouterr().err


def test_label_rows_match_rejections(tmp_path, config):
    out = tmp_path / "o"
    run("synth", "--config", config, "--out", out)
    assert run("label", "--config", config, "--out", out) == 0
    stats = json.loads((out / "labels.audit.json").read_text())["stats"]
    rows = (out / "labels.jsonl").read_text().splitlines()[1:]
    assert len(rows) == stats["sd_rejections"] == stats["n_samples"] > 0


def test_missing_task_bundle(tmp_path, config):
    assert run("label", "--config", config, "--out", tmp_path / "empty") == 2


def test_full_chain_deterministic(tmp_path, config):
    assert run("chain", "--config", config, "--out", tmp_path / "a") == 0
    assert run("chain", "--config", config, "--out", tmp_path / "b", "--jobs", 2) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert set(a) >= {"task.json", "labels.jsonl", "classifier.txt", "eval.json", "roc.csv", "bench.txt", "bench.jsonl"}
    assert a == b


def test_train_reproducible(tmp_path, config):
    out = tmp_path / "o"
    run("synth", "--config", config, "--out", out)
    run("label", "--config", config, "--out", out)
    run("train", "--config", config, "--out", out)
    first = (out / "classifier.txt").read_bytes()
    run("train", "--config", config, "--out", out)
    assert (out / "classifier.txt").read_bytes() == first
