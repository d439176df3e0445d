import json

import numpy as np
import pytest
from click.testing import CliRunner

from lfdkit.cli import main
from lfdkit.config import EngineConfig
from lfdkit.sim import AnomalySpec, Scenario


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """demo -> segment once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    Scenario(seed=21, variation=1.0).save(str(root / "scenario.json"))
    cfg = EngineConfig().replace(iterations=300, burn_in=150, chains=2)
    cfg.save(str(root / "config.json"))
    r = runner.invoke(main, ["demo", "--scenario", str(root / "scenario.json"),
                             "--out", str(root / "corpus.json")])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["segment", "--corpus", str(root / "corpus.json"),
                             "--config", str(root / "config.json"),
                             "--out", str(root / "model.json"), "--quiet"])
    assert r.exit_code == 0, r.output
    return root


def test_demo_writes_corpus_and_labels(workdir):
    doc = json.loads((workdir / "corpus.json").read_text())
    assert len(doc["demos"]) == 3
    labels = json.loads((workdir / "corpus.json.labels.json").read_text())
    assert set(labels) == {"0", "1", "2"}


def test_segment_outputs(workdir):
    model = json.loads((workdir / "model.json").read_text())
    assert model["format_version"] == 1
    seg = json.loads((workdir / "model.json.seg.json").read_text())
    assert set(seg) == {"skills", "labels", "map_logprob", "config_echo"}


def test_eval_seg_table(workdir):
    runner = CliRunner()
    r = runner.invoke(main, ["eval-seg",
                             "--pred", str(workdir / "model.json.seg.json"),
                             "--gt", str(workdir / "corpus.json.labels.json"),
                             "--out", str(workdir / "seg_report.json")])
    assert r.exit_code == 0, r.output
    assert "Acc" in r.output and "F1@50" in r.output
    rep = json.loads((workdir / "seg_report.json").read_text())
    assert 0 <= rep["acc"] <= 100


def test_execute_nominal_exit_zero(workdir):
    runner = CliRunner()
    Scenario(seed=500, variation=1.0).save(str(workdir / "nominal.json"))
    # refinement pass first: run unmonitored, merge, then monitored
    r = runner.invoke(main, ["execute", "--model", str(workdir / "model.json"),
                             "--scenario", str(workdir / "nominal.json"),
                             "--log", str(workdir / "ref.jsonl"), "--no-monitor"])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["refine", "--model", str(workdir / "model.json"),
                             "--log", str(workdir / "ref.jsonl")])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["execute", "--model", str(workdir / "model.json"),
                             "--scenario", str(workdir / "nominal.json"),
                             "--log", str(workdir / "nominal.jsonl")])
    assert r.exit_code == 0, r.output


def test_execute_injected_anomaly_exit_two(workdir):
    runner = CliRunner()
    Scenario(seed=501, variation=1.0).save(str(workdir / "anom_scenario.json"))
    r = runner.invoke(main, ["execute", "--model", str(workdir / "model.json"),
                             "--scenario", str(workdir / "anom_scenario.json"),
                             "--log", str(workdir / "anom.jsonl"),
                             "--inject", "force_spike:100:0"])
    assert r.exit_code == 2, r.output
    session = json.loads((workdir / "model.json.session.json").read_text())
    assert session["phase"] == "awaiting-recovery-demo"


def test_eval_anom_report(workdir):
    runner = CliRunner()
    sc = Scenario(seed=501, variation=1.0,
                  anomalies=(AnomalySpec("force_spike", 100, 0.0),))
    sc.save(str(workdir / "anom_scenario2.json"))
    r = runner.invoke(main, ["execute", "--model", str(workdir / "model.json"),
                             "--scenario", str(workdir / "anom_scenario2.json"),
                             "--log", str(workdir / "anom2.jsonl")])
    assert r.exit_code == 2, r.output
    r = runner.invoke(main, ["eval-anom",
                             "--log", str(workdir / "anom2.jsonl"),
                             "--scenario", str(workdir / "anom_scenario2.json"),
                             "--out", str(workdir / "anom_report.json")])
    assert r.exit_code == 0, r.output
    rep = json.loads((workdir / "anom_report.json").read_text())
    assert rep["episode_acc"] == 100.0


def test_bad_inject_spec_fails_cleanly(workdir):
    runner = CliRunner()
    Scenario(seed=1).save(str(workdir / "s.json"))
    r = runner.invoke(main, ["execute", "--model", str(workdir / "model.json"),
                             "--scenario", str(workdir / "s.json"),
                             "--log", str(workdir / "x.jsonl"),
                             "--inject", "nonsense"])
    assert r.exit_code == 1
    assert "kind:onset" in r.output


def test_missing_model_fails(workdir, tmp_path):
    runner = CliRunner()
    r = runner.invoke(main, ["execute", "--model", str(tmp_path / "nope.json"),
                             "--scenario", str(workdir / "scenario.json"),
                             "--log", str(tmp_path / "x.jsonl")])
    assert r.exit_code == 2  # click usage error for a missing path
