import json
import os

import numpy as np
import pytest

from plandq.cli import (EXIT_CONFIG, EXIT_MISSING, load_config, main)


BASE_CONFIG = """
[env]
kind = "open_maze"
episode_len = 30

[dataset]
path = "dataset.bin"
policy = "random_goal_avoider"
episodes = 4
seed = 7

[conductor]
kind = "dconductor"
K = 4
H = 3
M = 10
steps = 5
hidden = 16

[performer]
kind = "qperformer"
K = 4
steps = 5
hidden = 16

[orchestrator]
variant = "PlanDQ"
episodes = 2

[run]
seeds = [0]
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "config.toml"
    p.write_text(BASE_CONFIG)
    return str(p)


def test_load_config_roundtrip(cfg_path):
    cfg = load_config(cfg_path)
    assert cfg["env"]["kind"] == "open_maze"
    assert cfg["run"]["seeds"] == [0]


def test_missing_config_exit_code(tmp_path):
    rc = main(["gen-data", "--config", str(tmp_path / "nope.toml"),
               "--out", str(tmp_path)])
    assert rc == EXIT_CONFIG


def test_unknown_table_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[enviroment]\nkind = 'open_maze'\n")
    rc = main(["gen-data", "--config", str(p), "--out", str(tmp_path)])
    assert rc == EXIT_CONFIG


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[env]\nkind = 'open_maze'\nvelocity = 3\n")
    rc = main(["gen-data", "--config", str(p), "--out", str(tmp_path)])
    assert rc == EXIT_CONFIG


def test_gen_data_zero_episodes_rejected(cfg_path, tmp_path):
    rc = main(["gen-data", "--config", cfg_path, "--episodes", "0",
               "--out", str(tmp_path / "out")])
    assert rc == EXIT_CONFIG


def test_gen_data_writes_artifacts(cfg_path, tmp_path):
    out = tmp_path / "out"
    rc = main(["gen-data", "--config", cfg_path, "--out", str(out)])
    assert rc == 0
    assert (out / "dataset.bin").exists()
    sidecar = json.load(open(out / "dataset.bin.json"))
    assert sidecar["episodes"] == 4 and sidecar["seed"] == 7
    resolved = json.load(open(out / "resolved_config.json"))
    assert resolved["dataset"]["policy"] == "random_goal_avoider"


def test_gen_data_deterministic(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", cfg_path, "--out", str(a)]) == 0
    assert main(["gen-data", "--config", cfg_path, "--out", str(b)]) == 0
    assert (a / "dataset.bin").read_bytes() == (b / "dataset.bin").read_bytes()


def test_train_missing_dataset(cfg_path, tmp_path):
    rc = main(["train", "--config", cfg_path, "--out", str(tmp_path / "out")])
    assert rc == EXIT_MISSING


def test_eval_missing_checkpoints(cfg_path, tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    rc = main(["eval", "--config", cfg_path, "--out", str(out)])
    assert rc == EXIT_MISSING


def test_pipeline_gen_train_eval(cfg_path, tmp_path):
    out = str(tmp_path / "out")
    assert main(["gen-data", "--config", cfg_path, "--out", out]) == 0
    assert main(["train", "--config", cfg_path, "--out", out,
                 "--seed", "0"]) == 0
    assert os.path.exists(os.path.join(out, "conductor_seed0.ckpt"))
    assert os.path.exists(os.path.join(out, "performer_seed0.ckpt"))
    assert os.path.exists(os.path.join(out, "conductor_loss_seed0.csv"))
    assert os.path.exists(os.path.join(out, "performer_loss_seed0.csv"))
    assert main(["eval", "--config", cfg_path, "--out", out]) == 0
    agg = json.load(open(os.path.join(out, "eval_PlanDQ_aggregate.json")))
    assert agg["variant"] == "PlanDQ"
    assert len(agg["per_seed"]) == 1
    assert np.isfinite(agg["mean_normalized_score"])
    per_ep = os.path.join(out, "eval_PlanDQ_seed0.csv")
    assert os.path.exists(per_ep)


def test_train_unknown_conductor_kind(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(BASE_CONFIG.replace('kind = "dconductor"',
                                     'kind = "mystery"'))
    out = str(tmp_path / "out")
    assert main(["gen-data", "--config", str(p), "--out", out]) == 0
    rc = main(["train", "--config", str(p), "--out", out])
    assert rc == EXIT_CONFIG


def test_analyze_example1_exhaustive_grid(tmp_path):
    out = str(tmp_path / "out")
    rc = main(["analyze", "--mode", "example1", "--out", out])
    assert rc == 0
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    entry = manifest["entries"][0]
    assert entry["name"] == "example1_grid"
    assert entry["rows"] == 20 * 20 * 5 * 5
    import csv as csv_mod
    with open(os.path.join(out, "example1_grid.csv")) as f:
        rows = list(csv_mod.DictReader(f))
    assert all(r["diffuser_argmax"] == r["predicted_argmax"] for r in rows)
    assert all(r["q_action"] == "b2" for r in rows)


def test_analyze_valuemap_requires_checkpoints(cfg_path, tmp_path):
    rc = main(["analyze", "--mode", "valuemap", "--config", cfg_path,
               "--out", str(tmp_path / "out")])
    assert rc == EXIT_MISSING
