from __future__ import annotations

from pathlib import Path

import pytest

from hierfig.config import ConfigError, config_hash, defaults, load_config


def write(tmp_path, text, name="run.yaml") -> Path:
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_defaults_load_and_validate():
    cfg = load_config()
    assert cfg == defaults()
    assert cfg["cleanup"]["nms_iou"] == 0.7 and cfg["regions"]["tau"] == 0.1
    assert cfg["lvlm"]["sampling"]["top_k"] == 50


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train.stepz"):
        load_config(write(tmp_path, "train:\n  stepz: 3\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[1, 2]\n"))
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def test_overrides_and_merge(tmp_path):
    p = write(tmp_path, "train:\n  steps: 50\n")
    cfg = load_config(p, ["train.batch_size=8", "train.optim.branch_lr={shared: 1, bbox: 1, fine: 1, coarse: 1}"])
    assert cfg["train"]["steps"] == 50 and cfg["train"]["batch_size"] == 8
    assert cfg["train"]["d"] == 16
    assert cfg["train"]["optim"]["branch_lr"]["bbox"] == 1
    with pytest.raises(ConfigError):
        load_config(p, ["train.steps"])
    with pytest.raises(ConfigError, match="train.cycle"):
        load_config(p, ["train.cycle=1:1"])


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "conf"
    sub.mkdir()
    p = write(sub, "paths:\n  figures: ../data/figs.jsonl\nlvlm:\n  mock_dir: mocks\n")
    cfg = load_config(p)
    assert cfg["paths"]["figures"] == str((tmp_path / "data" / "figs.jsonl").resolve())
    assert cfg["lvlm"]["mock_dir"] == str((sub / "mocks").resolve())


def test_hash_ignores_paths(tmp_path):
    a = load_config(write(tmp_path, "paths:\n  figures: a.jsonl\n", "a.yaml"))
    b = load_config(write(tmp_path, "paths:\n  figures: b.jsonl\nlvlm:\n  mock_dir: m\n", "b.yaml"))
    c = load_config(write(tmp_path, "train:\n  steps: 7\n", "c.yaml"))
    assert config_hash(a) == config_hash(b) != config_hash(c)


@pytest.mark.parametrize("override", ["seeds.train=1.5", "seeds.split=null", "regions.tau=0",
                                      "cleanup.text_sim_threshold=1.5", "lvlm.mode=grpc",
                                      "panels.scale_range=[0.9, 0.5]", "eval.ks=[0, 5]", "train.d=1"])
def test_validation(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])
