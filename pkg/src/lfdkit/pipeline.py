"""End-to-end assembly: corpus in, fitted task model out.

Wires normalization, grid construction, goal-value precomputation, the
Gibbs segmenter, region extraction, mixture fitting, and threshold
calibration into single calls used by the CLI, the service, and tests.
"""

from __future__ import annotations

import numpy as np

from .config import EngineConfig
from .data import ObservationSet, normalize_features
from .graph import TaskGraph, from_sequence, graph_meta, refit_skill
from .grid import build_grid, precompute_goal_values
from .segment import build_problem, extract_segments, run


def segment_corpus(oset: ObservationSet, cfg: EngineConfig,
                   mode: str = "bngirl", seed: int | None = None,
                   progress=None) -> tuple:
    """Run the segmentation sampler on a corpus.

    Returns (skills, labels, info) where info carries the MAP score and the
    normalization parameters for the model file.
    """
    nset, norm = normalize_features(oset)
    grid, paths = build_grid(nset, cfg.grid_h)
    candidates = sorted({int(c) for p in paths for c in p.candidates})
    table = precompute_goal_values(grid, candidates, cfg.gamma)
    problem = build_problem(nset, grid, paths, table, cfg, mode=mode)
    results, best = run(problem, seed=seed if seed is not None else cfg.seed,
                        progress=progress)
    skills, labels = extract_segments(best, problem, raw_oset=oset)
    info = {
        "map_logprob": best.logprob,
        "map_iteration": best.iteration,
        "map_k": best.k,
        "norm": norm,
        "chains": len(results),
    }
    return skills, labels, info


def build_model(oset: ObservationSet, cfg: EngineConfig,
                mode: str = "bngirl", seed: int | None = None,
                progress=None) -> tuple:
    """Segment, fit per-skill mixtures, calibrate thresholds, build the graph."""
    skills, labels, info = segment_corpus(oset, cfg, mode=mode, seed=seed,
                                          progress=progress)
    for sk in skills:
        refit_skill(sk, cfg, oset.feature_names)
    graph = from_sequence(skills, meta=graph_meta(oset, cfg, mode, info["norm"]))
    return graph, labels, info


def segmentation_result_doc(graph: TaskGraph, labels: dict, info: dict,
                            cfg: EngineConfig) -> dict:
    """The segmentation-result file payload (skills, labels, score, config)."""
    return {
        "skills": [
            {
                "id": sk.id,
                "mu_G": sk.mu_g.tolist(),
                "Sigma_G": sk.sigma_g.tolist(),
                "mu_C": sk.mu_c.tolist(),
                "Sigma_C": sk.sigma_c.tolist(),
                "subgoals_per_demo": sk.subgoal_points.tolist(),
            }
            for sk in (graph.skills[i] for i in graph.nominal)
        ],
        "labels": {str(k): np.asarray(v).astype(int).tolist() for k, v in labels.items()},
        "map_logprob": info["map_logprob"],
        "config_echo": cfg.to_dict(),
    }


def teach_recovery(graph: TaskGraph, skill_id: int, label: int,
                   recovery_oset: ObservationSet,
                   cfg: EngineConfig | None = None) -> TaskGraph:
    """Segment a recovery corpus and append it as a branch.

    Recovery skills run through the same segmentation pipeline as nominal
    ones and carry their own subgoal and constraint regions.
    """
    from .graph import append_recovery

    cfg = cfg if cfg is not None else graph.config()
    skills, _, _ = segment_corpus(recovery_oset, cfg)
    for sk in skills:
        refit_skill(sk, cfg, recovery_oset.feature_names)
    return append_recovery(graph, skill_id, label, skills)
