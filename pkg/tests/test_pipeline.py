import numpy as np
import pytest

from lfdkit.config import EngineConfig
from lfdkit.data import RefinementSet
from lfdkit.graph import merge_refinement, serialize, deserialize
from lfdkit.pipeline import build_model, segmentation_result_doc, teach_recovery
from lfdkit.runtime import run_episode
from lfdkit.sim import AnomalySpec, Scenario, make_corpus, world_from_scenario

FAST = dict(iterations=120, burn_in=60, chains=1)


@pytest.fixture(scope="module")
def model():
    cfg = EngineConfig().replace(**FAST)
    oset, gt = make_corpus([21, 22, 23], 1.0)
    graph, labels, info = build_model(oset, cfg)
    return graph, labels, info, oset, gt, cfg


def test_build_model_produces_fitted_chain(model):
    graph, labels, info, oset, gt, cfg = model
    assert len(graph.nominal) >= 2
    for sid in graph.nominal:
        sk = graph.skills[sid]
        assert sk.mixture is not None
        assert sk.thresholds is not None
        assert sk.n_rows > 0
    assert set(labels) == {0, 1, 2}
    assert all(len(labels[d.id]) == len(d) for d in oset.demos)


def test_result_doc_schema(model):
    graph, labels, info, oset, gt, cfg = model
    doc = segmentation_result_doc(graph, labels, info, cfg)
    assert set(doc) == {"skills", "labels", "map_logprob", "config_echo"}
    for sk in doc["skills"]:
        assert set(sk) == {"id", "mu_G", "Sigma_G", "mu_C", "Sigma_C",
                           "subgoals_per_demo"}
    assert doc["config_echo"]["iterations"] == FAST["iterations"]


def test_nominal_execution_succeeds(model):
    graph, labels, info, oset, gt, cfg = model
    home = graph.meta["home"]
    # refinement pass: three unmonitored runs merged back
    entries = []
    for wseed in (201, 202, 203):
        log = run_episode(graph, world_from_scenario(
            Scenario(seed=wseed, variation=1.0), home=home), cfg,
            monitor_enabled=False)
        assert log.outcome == "success"
        entries.extend(log.refinement_set(oset.dt).entries)
    merge_refinement(graph, RefinementSet(entries=tuple(entries)))
    log = run_episode(graph, world_from_scenario(
        Scenario(seed=300, variation=1.0), home=home), cfg)
    assert log.outcome == "success"
    triggers = [e for e in log.events if e["type"] in ("anomaly", "refinement")]
    assert triggers == []


def test_model_roundtrip_after_build(model, tmp_path):
    graph, *_ = model
    p = tmp_path / "model.json"
    serialize(graph, str(p))
    back = deserialize(str(p))
    assert back.nominal == graph.nominal
    assert back.meta["home"] == graph.meta["home"]
