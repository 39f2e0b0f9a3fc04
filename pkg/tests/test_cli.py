from __future__ import annotations

import hashlib
import json

import pytest

from helpers import FIXTURE_CONFIG, FIXTURE_DIR, SYNTH_SPEC
from hierfig.cli import build_parser, main
from hierfig.pipeline import STAGES

COMPARED = ["panels.jsonl", "panels_text.jsonl", "regions_raw.jsonl", "corpus.jsonl", "cleanup_stats.json",
            "corpus/manifest.jsonl", "corpus/split.json", "train/checkpoint.npz", "train/loss_history.csv",
            "eval/retrieval.json", "report.json", "report.txt", "run_manifest.json"]


def tree_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def fixture_args(work, *extra) -> list[str]:
    return ["-c", str(FIXTURE_CONFIG), "--work-dir", str(work), *extra]


def test_parser_lists_every_stage():
    parser = build_parser()
    for name in STAGES + ["all"]:
        assert parser.parse_args([name]).command == name
    with pytest.raises(SystemExit):
        parser.parse_args(["train"])


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["report", "-c", str(tmp_path / "missing.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  nope: 1\n")
    assert main(["report", "-c", str(bad)]) == 1
    assert main(["report", *fixture_args(tmp_path), "--set", "regions.tau=-1"]) == 1
    assert "config error" in capsys.readouterr().err


def test_missing_prerequisite_exits_2_and_names_file(tmp_path, capsys):
    assert main(["pretrain", "--work-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "corpus/manifest.jsonl" in err and "build-corpus" in err
    assert main(["eval-retrieval", "--work-dir", str(tmp_path)]) == 2
    assert "checkpoint.npz" in capsys.readouterr().err


def test_endpoint_errors_exit_3(tmp_path, monkeypatch, capsys):
    empty = tmp_path / "mock"
    empty.mkdir()
    assert main(["parse-panels", *fixture_args(tmp_path / "w1"), "--mock-dir", str(empty)]) == 3
    assert "no fixture" in capsys.readouterr().err
    monkeypatch.delenv("HIERFIG_LVLM_BASE_URL", raising=False)
    assert main(["parse-panels", *fixture_args(tmp_path / "w2"), "--set", "lvlm.mode=http"]) == 3
    assert "endpoint" in capsys.readouterr().err


def test_staged_run_matches_all_and_leaves_inputs_alone(tmp_path, fixture_run, capsys):
    before = tree_digest(FIXTURE_DIR)
    work = tmp_path / "staged"
    for stage in STAGES:
        assert main([stage, *fixture_args(work)]) == 0, stage
    for rel in COMPARED:
        assert (work / rel).read_bytes() == (fixture_run / rel).read_bytes(), rel
    assert tree_digest(FIXTURE_DIR) == before

    # a second pass reuses every per-figure cache and changes nothing
    capsys.readouterr()
    events = work / "logs" / "events.jsonl"
    n_before = len(events.read_text().splitlines())
    assert main(["parse-panels", *fixture_args(work)]) == 0
    new = [json.loads(x) for x in events.read_text().splitlines()[n_before:]]
    assert {e["event"] for e in new if "figure_id" in e} == {"cached"}
    assert (work / "panels.jsonl").read_bytes() == (fixture_run / "panels.jsonl").read_bytes()


def test_report_contents(fixture_run):
    text = (fixture_run / "report.txt").read_text("utf-8")
    for k in ("R@1", "R@5", "R@10"):
        assert k in text
    doc = json.loads((fixture_run / "report.json").read_text("utf-8"))
    levels = {(r["level"], r["direction"]) for r in doc["retrieval"]}
    assert levels == {(lvl, d) for lvl in ("panel", "region") for d in ("T2I", "I2T")}
    assert set(doc["training"]["final_losses"]) >= {"intra_M", "intra_P", "intra_R", "fine"}
    assert doc["corpus"]["all"] == {"M": 20, "P": 59, "R": 72}


def test_synthetic_all(tmp_path, capsys):
    work = tmp_path / "synth"
    assert main(["all", "--synthetic", str(SYNTH_SPEC), "--work-dir", str(work), "--set", "train.steps=30"]) == 0
    out = capsys.readouterr().out
    assert "[build-corpus] ok" in out and "R@5" in out
    assert not (work / "panels.jsonl").exists()
    assert len((work / "train" / "loss_history.csv").read_text().splitlines()) == 31
    assert (work / "corpus" / "features.npz").exists()
