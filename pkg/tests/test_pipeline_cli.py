from __future__ import annotations

import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from chemotimeline.cli import main
from chemotimeline.corpus import load_corpus
from chemotimeline.pipeline import (
    ConfigError,
    RunConfig,
    build_gateway,
    config_from_dict,
    extract_corpus,
    load_config,
    run_pipeline,
)

VOLATILE = ("started_at", "timing_seconds")


def _cfg(fixtures_dir: Path, out: Path, **kw) -> RunConfig:
    return load_config(fixtures_dir / "run.toml", {"output_dir": str(out), **kw})


def _manifest(out: Path) -> dict:
    data = json.loads((out / "manifest.json").read_text())
    return {k: v for k, v in data.items() if k not in VOLATILE}


def test_baseline_matches_golden_file(fixtures_dir, tmp_path):
    run_pipeline(_cfg(fixtures_dir, tmp_path))
    golden = fixtures_dir / "golden" / "timelines_baseline.json"
    assert (tmp_path / "timelines.json").read_bytes() == golden.read_bytes()


def test_rerun_gives_same_manifest(fixtures_dir, tmp_path):
    run_pipeline(_cfg(fixtures_dir, tmp_path / "a"))
    run_pipeline(_cfg(fixtures_dir, tmp_path / "b"))
    assert _manifest(tmp_path / "a") == _manifest(tmp_path / "b")
    for name in ("extractions.json", "normalized.json", "timelines.json", "metrics.json", "gold_timelines.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("strategy", ["baseline", "thinking", "thinking_post", "dictionary", "ensemble"])
def test_every_strategy_runs_threaded_and_serial_alike(fixtures_dir, tmp_path, strategy):
    serial = run_pipeline(_cfg(fixtures_dir, tmp_path / "s", strategy=strategy))
    threaded = run_pipeline(_cfg(fixtures_dir, tmp_path / "t", strategy=strategy, workers=4, max_in_flight=2))
    assert serial["metrics"] == threaded["metrics"]
    assert (tmp_path / "s" / "timelines.json").read_bytes() == (tmp_path / "t" / "timelines.json").read_bytes()
    m = serial["metrics"]
    assert m["timeline_level"]["official"] == (m["timeline_level"]["type_a_f1"] + m["timeline_level"]["type_b_f1"]) / 2


def test_manifest_contents(fixtures_dir, tmp_path):
    report = run_pipeline(_cfg(fixtures_dir, tmp_path, strategy="thinking_post"))
    assert report["patients"] == 6 and report["notes"] == 20
    assert report["notes_without_doctime"] == 1
    assert report["warnings"]["truncated"] == 1
    assert report["model_calls"] == 20
    assert set(report["dropped"]) <= {"unknown-shape", "missing-anchor", "invalid-date"}


def test_dictionary_run_removes_false_positive(fixtures_dir, tmp_path):
    run_pipeline(_cfg(fixtures_dir, tmp_path, strategy="dictionary"))
    ex = json.loads((tmp_path / "extractions.json").read_text())["notes"]
    assert ex["p04_n1"]["triplets"] == []
    assert ex["p01_n3"]["triplets"] == [["AC", "ENDS-ON", "April 10, 2012"], ["Taxol", "BEGINS-ON", "next week"]]


def test_gateway_failure_becomes_empty_extraction(fixtures_dir, tmp_path):
    cfg = _cfg(fixtures_dir, tmp_path, mock_fixtures=str(tmp_path / "nowhere"))
    (tmp_path / "nowhere").mkdir()
    records = load_corpus(cfg.corpus_root)
    out = extract_corpus(records, cfg, build_gateway(cfg))
    assert all(e.triplets == [] and e.warnings["llm_failure"] == 1 for e in out)


def test_config_validation(tmp_path):
    base = {"corpus_root": "c", "mock_fixtures": "m"}
    with pytest.raises(ConfigError):
        config_from_dict({**base, "endpoint": {"url": "http://x", "model": "q"}})
    with pytest.raises(ConfigError):
        config_from_dict({"corpus_root": "c"})
    with pytest.raises(ConfigError):
        config_from_dict({**base, "strategy": "magic"})
    with pytest.raises(ConfigError):
        config_from_dict({**base, "sampling": {"top_q": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({**base, "ensemble": [{"strategy": "ensemble"}]})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    cfg = config_from_dict({**base, "ensemble": [{"strategy": "baseline", "model": "sft"}]}, tmp_path)
    assert cfg.corpus_root == tmp_path / "c" and cfg.ensemble[0].model == "sft"


def test_cli_run_and_exit_codes(fixtures_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "--config", str(fixtures_dir / "run.toml"), "--out", str(tmp_path / "o")]) == 0
    assert "official=" in capsys.readouterr().out
    bad = tmp_path / "bad.toml"
    bad.write_text('corpus_root = "c"\nmock_fixtures = "m"\n[endpoint]\nurl = "http://x"\nmodel = "q"\n')
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--corpus", str(tmp_path / "absent"), "--mock-fixtures", str(tmp_path)]) == 1
    assert not (tmp_path / "out").exists()
    assert main(["run", "--mock-fixtures", str(tmp_path)]) == 2


def test_cli_stagewise_commands(fixtures_dir, tmp_path, capsys):
    corpus, mock = str(fixtures_dir / "corpus"), str(fixtures_dir / "mock")
    ex = tmp_path / "ex.json"
    assert main(["extract", "--corpus", corpus, "--mock-fixtures", mock, "--strategy", "baseline", "--out", str(ex)]) == 0
    tl = tmp_path / "tl.json"
    assert main(["aggregate", "--in", str(ex), "--corpus", corpus, "--out", str(tl),
                 "--normalized-out", str(tmp_path / "norm.json")]) == 0
    assert tl.read_bytes() == (fixtures_dir / "golden" / "timelines_baseline.json").read_bytes()

    run_dir = tmp_path / "run"
    run_pipeline(_cfg(fixtures_dir, run_dir))
    report = tmp_path / "eval.json"
    assert main(["evaluate", "--pred", str(tl), "--gold", str(run_dir / "gold_timelines.json"),
                 "--out", str(report)]) == 0
    expected = json.loads((run_dir / "metrics.json").read_text())["timeline_level"]
    assert json.loads(report.read_text())["timeline_level"] == expected

    assert main(["evaluate", "--level", "note", "--pred", str(ex), "--gold", corpus]) == 0
    note_level = json.loads(capsys.readouterr().out)["note_level"]
    assert note_level == json.loads((run_dir / "metrics.json").read_text())["note_level"]


def test_cli_timenorm(monkeypatch, capsys):
    monkeypatch.setattr(sys, "stdin", io.StringIO("last week\t2013-01-15\nnext week\t2013-07-23\n4 cycles\t2013-01-01\n"))
    assert main(["timenorm"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["last week\tday\t2013-01-08", "next week\tweek\t2013-w31", "4 cycles\tunnormalizable\tunknown-shape"]


def test_cli_dataset_prep(fixtures_dir, tmp_path):
    corpus = str(fixtures_dir / "corpus")
    assert main(["sft-prep", "--corpus", corpus, "--out-dir", str(tmp_path / "sft")]) == 0
    assert len((tmp_path / "sft" / "sft.jsonl").read_text().splitlines()) == 20
    cands = tmp_path / "c.jsonl"
    cands.write_text(json.dumps({"note_id": "p01_n3", "candidates": [
        "[]", '[{"SACT": "AC", "relation": "ENDS-ON", "time": "April 10, 2012"}]']}) + "\n")
    assert main(["dpo-prep", "--corpus", corpus, "--candidates", str(cands), "--out-dir", str(tmp_path / "dpo")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "dpo" / "dpo.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and rows[0]["rejected"] == "[]"


def test_module_entry_point(fixtures_dir):
    proc = subprocess.run([sys.executable, "-m", "chemotimeline", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "timenorm" in proc.stdout
