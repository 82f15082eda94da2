import json
import os

import numpy as np
import pytest

import eqprecoder.training as training
from eqprecoder.cli import EXIT_CONFIG, EXIT_DIVERGED, main
from eqprecoder.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from eqprecoder.dataset import load_npz, wmmse_references
from eqprecoder.net import load_checkpoint
from eqprecoder.training import normalized_wsr_of

TINY = {
    "scenario": {"n": 4, "k": 2},
    "data": {"holdout_samples": 8, "test_samples": 8, "chunk_size": 4},
    "net": {"hidden_channels": 2, "subnet_hidden_channels": 4},
    "train": {"num_samples": 16, "epochs": 3, "batch_size": 8},
    "wmmse": {"max_iters": 100, "rel_tol": 1e-6},
    "eval": {"sweeps": [{"axis": "num_ues", "values": [2, 3, 5]}, {"axis": "num_antennas", "values": [3, 5]}]},
    "pf": {"episodes": 3, "slots": 4},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(cfg_file, out, *args):
    return main([args[0], "--config", cfg_file, "--out", str(out), *args[1:]])


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


# --------------------------------------------------------------------------
# configuration


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"scenario": {"antennas": 8}})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"batch_size": 0}})


def test_overrides_and_digest(cfg_file):
    cfg = load_config(cfg_file, ["train.epochs=7", "net.activation_scope=global"])
    assert cfg.train.epochs == 7 and cfg.net.activation_scope == "global"
    assert cfg.scenario.n == 4
    moved = config_from_dict({**TINY, "output_dir": "elsewhere", "jobs": 4})
    assert moved.digest() == config_from_dict(TINY).digest()
    assert config_from_dict({**TINY, "seed": 1}).digest() != moved.digest()
    with pytest.raises(ConfigError):
        load_config(None, ["novalue"])


def test_partial_section_keeps_experiment_defaults():
    base = ExperimentConfig()
    cfg = load_config(None, ['train.lr_schedule="constant"'])
    assert cfg.train.num_samples == base.train.num_samples
    assert cfg.train.epochs == base.train.epochs
    assert cfg.wmmse == base.wmmse


def test_seed_derivation():
    cfg = ExperimentConfig(seed=10)
    assert [cfg.seed_for(w) for w in ("train", "holdout", "test", "pf", "oracle")] == [11, 12, 13, 14, 15]


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"scenario": {"antennas": 3}}')
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


# --------------------------------------------------------------------------
# commands


def test_gen_is_idempotent(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert run(cfg_file, out, "gen") == 0
    first = {n: read(out / "data" / n) for n in ("train.npz", "holdout.npz", "manifest.json")}
    mtime = os.path.getmtime(out / "data" / "train.npz")
    assert run(cfg_file, out, "gen") == 0
    assert os.path.getmtime(out / "data" / "train.npz") == mtime
    for n, blob in first.items():
        assert read(out / "data" / n) == blob
    manifest = json.loads(first["manifest.json"])
    assert manifest["datasets"]["train"]["samples"] == 16
    resolved = json.loads(read(out / "data" / "config.resolved.json"))
    assert resolved["seeds"]["train"] == 1 and "config_hash" in resolved
    # a fresh directory reproduces identical bytes
    other = tmp_path / "again"
    assert run(cfg_file, other, "gen") == 0
    assert read(other / "data" / "train.npz") == first["train.npz"]


def test_train_eval_pf(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(cfg_file, out, "train") == 0
    rows = read(out / "train" / "history.csv").decode().splitlines()
    assert rows[0] == "epoch,mean_loss,normalized_wsr" and len(rows) == 4

    # checkpoint reload reproduces the last held-out metric
    params, meta = load_checkpoint(out / "train" / "checkpoint.npz")
    holdout = load_npz(out / "data" / "holdout.npz")
    cfg = load_config(cfg_file)
    ref = wmmse_references(holdout, cfg.wmmse, out / "cache" / "wmmse", chunk_size=4)
    assert ref.computed_chunks == 0
    last = float(rows[-1].split(",")[2])
    assert normalized_wsr_of(params, holdout, ref.wsr) == pytest.approx(last, abs=1e-9)

    assert run(cfg_file, out, "eval") == 0
    metrics = json.loads(read(out / "eval" / "metrics.json"))
    assert metrics["test"]["normalized_wsr"]["wmmse"]["mean"] == pytest.approx(1.0, abs=1e-12)
    assert metrics["config_hash"] == cfg.digest() and metrics["seed"] == 0
    assert len(metrics["sweeps"]["num_ues"]) == 3 and len(metrics["sweeps"]["num_antennas"]) == 2
    assert any("zf skipped" in n for n in metrics["notes"])
    sweep_rows = read(out / "eval" / "sweep_num_ues.csv").decode().splitlines()
    assert len(sweep_rows) == 4
    first_metrics = read(out / "eval" / "metrics.json")
    assert run(cfg_file, out, "eval") == 0
    assert read(out / "eval" / "metrics.json") == first_metrics

    assert run(cfg_file, out, "pf", "--write-traces") == 0
    pf = json.loads(read(out / "pf" / "metrics.json"))
    assert set(pf["policies"]) == {"wmmse", "wmmse_srm", "network"}
    assert os.path.exists(out / "pf" / "traces_network.csv")
    assert "network median offset" in capsys.readouterr().out


def test_resume_equals_uninterrupted(cfg_file, tmp_path):
    full, parts = tmp_path / "full", tmp_path / "parts"
    assert run(cfg_file, full, "train") == 0
    assert run(cfg_file, parts, "train", "--stop-after", "1") == 0
    assert len(read(parts / "train" / "history.csv").decode().splitlines()) == 2
    assert run(cfg_file, parts, "train", "--resume") == 0
    for name in ("checkpoint.npz", "history.csv", "state.npz"):
        assert read(parts / "train" / name) == read(full / "train" / name)


def test_resume_with_changed_config_refused(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert run(cfg_file, out, "train", "--stop-after", "1") == 0
    assert run(cfg_file, out, "train", "--resume", "--lr", "0.1") == EXIT_CONFIG


def test_eval_without_checkpoint(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path / "none", "eval") == EXIT_CONFIG


def test_divergence_exit_code(cfg_file, tmp_path, monkeypatch):
    def broken(H, alpha, noise, p_m, params):
        return float("nan"), np.zeros_like(params.flat)

    monkeypatch.setattr(training, "loss_and_grad", broken)
    out = tmp_path / "run"
    assert run(cfg_file, out, "train") == EXIT_DIVERGED
    assert os.path.exists(out / "train" / "last_good.npz")


def test_oracle_json(cfg_file, tmp_path, capsys):
    assert run(cfg_file, tmp_path / "o", "oracle", "--json") == 0
    report = json.loads(capsys.readouterr().out)
    dims = {row["family"]: row["dimension"] for row in report}
    assert all(row["residual"] < 1e-8 for row in report)
    assert dims == {"unitary_left": 4, "unitary_absorb": 0, "perm_diag": 15, "perm_pair": 4}


def test_gradcheck(cfg_file, tmp_path, capsys):
    assert run(cfg_file, tmp_path / "g", "gradcheck", "--points", "1") == 0
    assert run(cfg_file, tmp_path / "g", "gradcheck", "--points", "1", "--tol", "0") == 1
