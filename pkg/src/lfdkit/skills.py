"""Skill model: the per-segment artifact produced by segmentation.

A skill owns its observation subset, a subgoal region over states, a
constraint region over features, per-demonstration subgoal points, and the
runtime attachments (motion/anomaly mixture, thresholds, anomaly memory)
filled in by the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mixture import GaussianMixture, Thresholds


@dataclass
class AnomalyMemory:
    """Per-skill record of past anomaly windows and their labels."""

    windows: list = field(default_factory=list)   # each (eps, out_dim) array
    labels: list = field(default_factory=list)    # one label per window
    mixture: GaussianMixture | None = None
    log_p_min_xi: float = np.inf

    @property
    def label_set(self) -> list:
        return sorted(set(self.labels))

    def rows(self) -> np.ndarray:
        return np.concatenate(self.windows, axis=0)

    def to_dict(self) -> dict:
        return {
            "windows": [w.tolist() for w in self.windows],
            "labels": list(self.labels),
            "mixture": self.mixture.to_dict() if self.mixture is not None else None,
            "log_p_min_xi": self.log_p_min_xi if np.isfinite(self.log_p_min_xi) else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalyMemory":
        return cls(
            windows=[np.asarray(w, float) for w in d["windows"]],
            labels=[int(v) for v in d["labels"]],
            mixture=GaussianMixture.from_dict(d["mixture"]) if d["mixture"] else None,
            log_p_min_xi=d["log_p_min_xi"] if d["log_p_min_xi"] is not None else np.inf,
        )


def _mat(m: np.ndarray) -> dict:
    m = np.asarray(m, float)
    return {"rows": m.shape[0], "cols": m.shape[1], "data": m.flatten().tolist()}


def _unmat(d: dict) -> np.ndarray:
    return np.asarray(d["data"], float).reshape(d["rows"], d["cols"])


@dataclass
class SkillModel:
    id: int
    mu_g: np.ndarray             # subgoal region mean (state space)
    sigma_g: np.ndarray          # subgoal region covariance (floored)
    subgoal_points: np.ndarray   # (n_demos_present, 2) inferred per-demo subgoals
    subgoal_dmax: float          # reach threshold over the inferred subgoals
    mu_c: np.ndarray             # constraint region mean (normalized features)
    sigma_c: np.ndarray
    rows: np.ndarray             # observation subset, raw (s, a, f) rows
    missing_demos: tuple = ()    # demo ids with no frames in this skill
    mixture: GaussianMixture | None = None
    thresholds: Thresholds | None = None
    memory: AnomalyMemory = field(default_factory=AnomalyMemory)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def subgoal_distance(self, s: np.ndarray) -> float:
        dev = np.asarray(s, float) - self.mu_g
        sol = np.linalg.solve(self.sigma_g, dev)
        return float(np.sqrt(max(dev @ sol, 0.0)))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "mu_G": self.mu_g.tolist(),
            "Sigma_G": _mat(self.sigma_g),
            "subgoals": self.subgoal_points.tolist(),
            "subgoal_dmax": self.subgoal_dmax,
            "mu_C": self.mu_c.tolist(),
            "Sigma_C": _mat(self.sigma_c),
            "rows": _mat(self.rows),
            "missing_demos": list(self.missing_demos),
            "mixture": self.mixture.to_dict() if self.mixture is not None else None,
            "thresholds": self.thresholds.to_dict() if self.thresholds is not None else None,
            "anomaly_memory": self.memory.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkillModel":
        known = {"id", "mu_G", "Sigma_G", "subgoals", "subgoal_dmax", "mu_C",
                 "Sigma_C", "rows", "missing_demos", "mixture", "thresholds",
                 "anomaly_memory"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown skill field: {sorted(unknown)[0]}")
        return cls(
            id=int(d["id"]),
            mu_g=np.asarray(d["mu_G"], float),
            sigma_g=_unmat(d["Sigma_G"]),
            subgoal_points=np.asarray(d["subgoals"], float).reshape(-1, 2),
            subgoal_dmax=float(d["subgoal_dmax"]),
            mu_c=np.asarray(d["mu_C"], float),
            sigma_c=_unmat(d["Sigma_C"]),
            rows=_unmat(d["rows"]),
            missing_demos=tuple(d["missing_demos"]),
            mixture=GaussianMixture.from_dict(d["mixture"]) if d["mixture"] else None,
            thresholds=Thresholds.from_dict(d["thresholds"]) if d["thresholds"] else None,
            memory=AnomalyMemory.from_dict(d["anomaly_memory"]),
        )
