import csv
import hashlib
import io
import time

import numpy as np
import pytest
import torch
import yaml

from cmml.cli import main
from cmml.data import load_dataset, load_manifest
from cmml.model import tensorize
from cmml.trainer import load_checkpoint, predict
from cmml.data import AvailabilityMask

TINY = {
    "seed": 0,
    "data": {"n_train": 24, "synthetic": {"n_samples": 36, "feature_dim": 6, "latent_dim": 4,
                                          "n_attributes": 2, "noise_std": 0.5}},
    "model": {"d": 16, "d_r": 12, "image_tokens": 3, "channels": 4, "hidden": 8, "heads": 4,
              "L": 2, "r": 2, "dtype": "float64"},
    "memory": {"slots": 6, "update_epochs": 1},
    "train": {"epochs": 2, "warmup_epochs": 1, "decay_every": 1, "batch_size": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def run(*args):
    return main([str(a) for a in args])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def trained(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert run("train", "--config", cfg_path, "--out-dir", out) == 0
    data = tmp_path / "data.jsonl"
    assert run("generate", "--config", cfg_path, "--out", data) == 0
    return out, data


# -- generate --------------------------------------------------------------

def test_generate_deterministic_and_manifest(tmp_path, cfg_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("generate", "--config", cfg_path, "--out", a) == 0
    assert run("generate", "--config", cfg_path, "--out", b) == 0
    assert digest(a) == digest(b)
    assert "36 samples" in capsys.readouterr().out
    man = load_manifest(a)
    assert man.n_samples == 36 and man.M == 3 and man.vector_lengths == [6, 6]
    assert len(load_dataset(a)) == 36


def test_generate_zero_samples(tmp_path, cfg_path):
    out = tmp_path / "empty.jsonl"
    assert run("generate", "--config", cfg_path, "--set", "data.synthetic.n_samples=0", "--out", out) == 0
    assert load_dataset(out) == []
    assert load_manifest(out).n_samples == 0


def test_generate_seed_override_changes_data(tmp_path, cfg_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run("generate", "--config", cfg_path, "--out", a)
    run("generate", "--config", cfg_path, "--set", "data.synthetic.seed=7", "--out", b)
    assert digest(a) != digest(b)


# -- config errors ---------------------------------------------------------

def test_missing_config_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert run("train", "--config", missing) == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("override,needle", [
    ("memory.decay=1.5", "memory.decay"),
    ("loss.tau=0", "loss.tau"),
    ("model.heads=3", "model.heads"),
    ("model.r=3", "model.r"),
    ("model.foo=1", "model.foo"),
    ("train.epochs=abc", "train.epochs"),
])
def test_invalid_config_names_key(cfg_path, capsys, override, needle):
    assert run("train", "--config", cfg_path, "--set", override) == 1
    assert needle in capsys.readouterr().err


def test_unknown_switch_exit_1(cfg_path, capsys):
    assert run("train", "--config", cfg_path, "--set", "model.switches=[no_everything]") == 1
    assert "no_everything" in capsys.readouterr().err


# -- train -----------------------------------------------------------------

def test_train_writes_artifacts(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    t0 = time.perf_counter()
    assert run("train", "--config", cfg_path, "--set", "train.epochs=1", "--out-dir", out) == 0
    assert time.perf_counter() - t0 < 30
    for name in ("checkpoint.pt", "checkpoint.pt.json", "train_log.jsonl", "metrics.csv", "config.yaml"):
        assert (out / name).is_file(), name
    text = capsys.readouterr().out
    assert "final L_total=" in text
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 8 and rows[-1]["pattern"] == "AVG"


def test_train_resume_equals_uninterrupted(tmp_path, cfg_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train", "--config", cfg_path, "--set", "train.epochs=3", "--out-dir", full) == 0
    assert run("train", "--config", cfg_path, "--set", "train.epochs=3", "--out-dir", part,
               "--until-epoch", "1") == 0
    assert load_checkpoint(part / "checkpoint.pt").epoch == 1
    assert run("train", "--config", cfg_path, "--set", "train.epochs=3", "--out-dir", part,
               "--resume", part / "checkpoint.pt") == 0
    a = load_checkpoint(full / "checkpoint.pt")
    b = load_checkpoint(part / "checkpoint.pt")
    assert b.epoch == 3
    for k, v in a.model.state_dict().items():
        assert torch.allclose(v.double(), b.model.state_dict()[k].double(), atol=1e-10, rtol=0), k
    for ra, rb in zip(a.log, b.log):
        assert ra["L_total"] == pytest.approx(rb["L_total"], abs=1e-10)


def test_resume_with_other_switches_refused(tmp_path, cfg_path, trained):
    out, _ = trained
    code = run("train", "--config", cfg_path, "--set", "model.switches=[no_cdr]", "--out-dir",
               tmp_path / "x", "--resume", out / "checkpoint.pt")
    assert code == 1


# -- eval ------------------------------------------------------------------

def test_eval_rows_and_repeatability(tmp_path, trained):
    out, data = trained
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("eval", "--checkpoint", out / "checkpoint.pt", "--data", data, "--out", a) == 0
    assert run("eval", "--checkpoint", out / "checkpoint.pt", "--data", data, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_csv(a)
    assert [r["pattern"] for r in rows] == ["0", "1", "2", "01", "02", "12", "012", "AVG"]
    accs = [float(r["ACC"]) for r in rows[:-1]]
    aucs = [float(r["AUC"]) for r in rows[:-1]]
    assert float(rows[-1]["ACC"]) == pytest.approx(np.mean(accs), abs=1e-12)
    assert float(rows[-1]["AUC"]) == pytest.approx(np.mean(aucs), abs=1e-12)


def test_eval_pattern_subset_to_stdout(trained, capsys):
    out, data = trained
    capsys.readouterr()
    assert run("eval", "--checkpoint", out / "checkpoint.pt", "--data", data, "--patterns", "0,12") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split(",")[0] for l in lines] == ["pattern", "0", "12", "AVG"]


def test_eval_refuses_mismatched_dataset(tmp_path, cfg_path, trained, capsys):
    out, _ = trained
    other = tmp_path / "other.jsonl"
    run("generate", "--config", cfg_path, "--set", "data.synthetic.C=4", "--out", other)
    assert run("eval", "--checkpoint", out / "checkpoint.pt", "--data", other) == 2
    assert "C" in capsys.readouterr().err


# -- export-features -------------------------------------------------------

def test_export_features_matches_in_process(tmp_path, trained):
    out, data = trained
    dest = tmp_path / "f.csv"
    assert run("export-features", "--checkpoint", out / "checkpoint.pt", "--data", data,
               "--pattern", "01", "--out", dest) == 0
    rows = read_csv(dest)
    assert len(rows) == 36 and len(rows[0]) == 16 + 1
    state = load_checkpoint(out / "checkpoint.pt")
    batch = tensorize(load_dataset(data), state.model.cfg)
    _, fused = predict(state.model, batch, AvailabilityMask.from_pattern("01", 3))
    got = np.array([[float(r[f"f{k}"]) for k in range(16)] for r in rows])
    np.testing.assert_allclose(got, fused, atol=1e-12, rtol=0)
    assert [int(r["label"]) for r in rows] == batch.labels.tolist()


def test_export_pattern_flag_matters(tmp_path, trained):
    out, data = trained
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("export-features", "--checkpoint", out / "checkpoint.pt", "--data", data, "--pattern", "0", "--out", a)
    run("export-features", "--checkpoint", out / "checkpoint.pt", "--data", data, "--pattern", "012", "--out", b)
    assert a.read_bytes() != b.read_bytes()


# -- ablation --------------------------------------------------------------

def test_ablation_outputs_and_determinism(tmp_path, cfg_path, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert run("ablation", "--config", cfg_path, "--switches", "no_cdr", "--out-dir", d) == 0
        outs.append(d / "ablation")
    abl = outs[0]
    assert (abl / "full.csv").is_file() and (abl / "no_cdr.csv").is_file()
    rows = read_csv(abl / "comparison.csv")
    assert len(rows) == 2 * 8
    assert {r["variant"] for r in rows} == {"full", "no_cdr"}
    assert all(float(r["dAUC"]) == 0.0 for r in rows if r["variant"] == "full")
    for f in ("full.csv", "no_cdr.csv", "comparison.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert "no_cdr" in capsys.readouterr().out
