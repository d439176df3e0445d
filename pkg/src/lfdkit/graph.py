"""High-level task structure: the nominal skill chain, label-keyed recovery
branches, post-recovery re-entry, refinement merging, and persistence.

The graph is mutated only between episodes; during execution it is shared
read-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .data import NormParams, RefinementSet
from .mixture import calibrate, fit_gmm
from .skills import SkillModel

FORMAT_VERSION = 1


class GraphError(ValueError):
    pass


@dataclass
class TaskGraph:
    skills: dict                 # id -> SkillModel (nominal and recovery)
    nominal: list                # ordered skill ids, last is terminal
    recovery: dict = field(default_factory=dict)   # skill id -> {label -> [ids]}
    root: int = 0
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)    # replaced branches, versioned

    @property
    def terminal(self) -> int:
        return self.nominal[-1]

    def skill(self, skill_id: int) -> SkillModel:
        return self.skills[skill_id]

    def branch(self, skill_id: int, label: int) -> list | None:
        return self.recovery.get(skill_id, {}).get(label)

    def config(self) -> EngineConfig:
        return EngineConfig.from_dict(self.meta["config"])


def from_sequence(skills: list, meta: dict | None = None) -> TaskGraph:
    """Chain graph in inferred order; the last node is terminal."""
    if not skills:
        raise GraphError("cannot build a task graph from an empty skill list")
    return TaskGraph(
        skills={s.id: s for s in skills},
        nominal=[s.id for s in skills],
        root=skills[0].id,
        meta=meta or {},
    )


def append_recovery(graph: TaskGraph, skill_id: int, label: int,
                    chain: list) -> TaskGraph:
    """Attach a recovery chain for (skill, anomaly label).

    Branch entry is label-keyed, not cycle-keyed, so the behavior is
    reusable throughout the skill.  A duplicate (skill, label) replaces the
    old branch and records it in the versioned history.
    """
    if skill_id not in graph.skills:
        raise GraphError(f"unknown skill id {skill_id}")
    if not chain:
        raise GraphError("recovery chain must contain at least one skill")
    owner = graph.skills[skill_id]
    if label not in owner.memory.label_set:
        raise GraphError(f"label {label} not registered for skill {skill_id}")
    taken = set(graph.skills)
    next_id = max(taken) + 1
    ids = []
    for sk in chain:
        sk.id = next_id
        graph.skills[next_id] = sk
        ids.append(next_id)
        next_id += 1
    branches = graph.recovery.setdefault(skill_id, {})
    if label in branches:
        graph.history.append({"skill": skill_id, "label": label,
                              "replaced": branches[label],
                              "version": len(graph.history) + 1})
    branches[label] = ids
    return graph


def next_after_recovery(graph: TaskGraph, s: np.ndarray) -> int | None:
    """Nominal skill with the highest input-marginal density at state s.

    Ties (within 1e-12) break toward the earliest nominal skill.  Returns
    None when every nominal skill's density falls below its own calibrated
    minimum: a halt-for-teaching condition.
    """
    s = np.asarray(s, float)
    scores = []
    for sid in graph.nominal:
        sk = graph.skills[sid]
        scores.append(sk.mixture.input_marginal_log(s))
    best = max(scores)
    any_confident = any(
        sc >= graph.skills[sid].thresholds.log_p_min_s
        for sid, sc in zip(graph.nominal, scores)
    )
    if not any_confident:
        return None
    for sid, sc in zip(graph.nominal, scores):
        if sc >= best - 1e-12:
            return sid
    return graph.nominal[-1]


def merge_refinement(graph: TaskGraph, ref: RefinementSet) -> TaskGraph:
    """Extend per-skill observation subsets with refinement rows.

    Mixtures are refit and thresholds recalibrated over the union; subgoal
    regions stay untouched.  An empty refinement leaves the graph
    bit-identical.
    """
    grouped = ref.by_skill()
    if not grouped:
        return graph
    unknown = set(grouped) - set(graph.skills)
    if unknown:
        raise GraphError(f"refinement references unknown skill {sorted(unknown)[0]}")
    cfg = graph.config()
    names = graph.meta["feature_names"]
    for sid, frames in sorted(grouped.items()):
        sk = graph.skills[sid]
        new_rows = np.array([np.concatenate([fr.s, fr.a, fr.f]) for fr in frames])
        sk.rows = np.concatenate([sk.rows, new_rows], axis=0)
        refit_skill(sk, cfg, names)
    return graph


def xi_columns(feature_names, cfg: EngineConfig) -> list:
    """Feature indices carried in the runtime output vector."""
    names = list(feature_names)
    out = []
    for want in cfg.xi_features:
        if want in names:
            out.append(names.index(want))
    return out


def skill_joint_rows(skill: SkillModel, feature_names, cfg: EngineConfig) -> np.ndarray:
    """Joint (state, output) rows: state, displacement, selected features."""
    rows = skill.rows
    cols = [4 + i for i in xi_columns(feature_names, cfg)]
    return np.hstack([rows[:, :4]] + [rows[:, c:c + 1] for c in cols])


def refit_skill(skill: SkillModel, cfg: EngineConfig, feature_names) -> None:
    """Fit the motion/anomaly mixture and calibrate thresholds on skill.rows.

    The regression input is the state; the output is the per-step
    displacement plus the interaction features named in the config
    (state-derived distance features stay out of the runtime vector).
    """
    joint = skill_joint_rows(skill, feature_names, cfg)
    skill.mixture = fit_gmm(joint, cfg.n_components, reg=cfg.gmm_reg,
                            seed=cfg.seed, n_in=2)
    skill.thresholds = calibrate(skill.mixture, joint, cfg.epsilon_cycles)


def serialize(graph: TaskGraph, path: str) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "meta": graph.meta,
        "skills": [graph.skills[k].to_dict() for k in sorted(graph.skills)],
        "nominal": list(graph.nominal),
        "recovery": {str(k): {str(l): v for l, v in b.items()}
                     for k, b in sorted(graph.recovery.items())},
        "root": graph.root,
        "history": graph.history,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def deserialize(path: str) -> TaskGraph:
    with open(path) as fh:
        doc = json.load(fh)
    known = {"format_version", "meta", "skills", "nominal", "recovery", "root",
             "history"}
    unknown = set(doc) - known
    if unknown:
        raise GraphError(f"unknown field in task model file: {sorted(unknown)[0]}")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise GraphError(f"task model format version {version} != supported {FORMAT_VERSION}")
    skills = {}
    for sd in doc["skills"]:
        sk = SkillModel.from_dict(sd)
        skills[sk.id] = sk
    return TaskGraph(
        skills=skills,
        nominal=[int(v) for v in doc["nominal"]],
        recovery={int(k): {int(l): [int(i) for i in v] for l, v in b.items()}
                  for k, b in doc["recovery"].items()},
        root=int(doc["root"]),
        meta=doc["meta"],
        history=doc["history"],
    )


def graph_meta(oset, cfg: EngineConfig, mode: str, norm: NormParams | None) -> dict:
    starts = np.array([d.states()[0] for d in oset.demos])
    return {
        "dt": oset.dt,
        "feature_names": list(oset.feature_names),
        "workspace": {"min": list(oset.workspace[0]), "max": list(oset.workspace[1])},
        "norm": norm.to_dict() if norm is not None else None,
        "config": cfg.to_dict(),
        "mode": mode,
        # executions launch from the taught start region, not a fixed constant
        "home": starts.mean(axis=0).tolist(),
    }
