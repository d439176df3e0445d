"""Engine configuration: every tunable numeric constant in one place.

All values can be overridden from a JSON config file or CLI flags; the
defaults below are the single source used across the library.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass
class EngineConfig:
    # grid MDP
    grid_h: float = 0.025           # cell resolution, meters
    gamma: float = 0.90             # discount factor
    alpha: float = 5.0              # confidence in the demonstrator (softmax sharpness)

    # segmentation sampler
    eta: float = 1.0                # new-cluster concentration
    k_init: int = 5                 # initial number of clusters
    init: str = "blocks"            # z0 scheme: contiguous "blocks" per demo
                                    # or "uniform" random labels
    iterations: int = 1000          # Gibbs sweeps per chain
    burn_in: int = 500              # sweeps discarded before MAP selection
    chains: int = 3
    smooth_window: int = 5          # median filter width for label post-processing
    cov_floor: float = 1e-6         # relative (trace-scaled) covariance floor
    subgoal_prior_cells: float = 0.35  # expected cross-demo subgoal agreement,
                                       # in grid cells (state-space prior scale)

    # motion / anomaly mixtures
    n_components: int = 2           # Gaussian components per skill
    gmm_reg: float = 1e-6           # covariance floor added each M-step
    xi_features: tuple = ("force",) # features carried in the runtime output
                                    # vector alongside the displacement
                                    # (state-derived distances stay out)
    epsilon_cycles: int = 30        # consecutive flagged cycles before a trigger (0.3 s at dt=0.01)
    anomaly_components: int = 2     # cap on anomaly-memory mixture size
    classifier_window: int = 100    # max rows per event window fed to the classifier
    subgoal_dmax_floor: float = 2.0 # minimum subgoal-reached threshold; the max
                                    # distance over a handful of inferred
                                    # subgoals underestimates the region badly

    # execution
    max_cycles: int = 5000          # per-episode cycle budget
    handover_margin: float = 5.0    # a successor may take over when its input
                                    # density is within e^margin of the active
                                    # skill's (or clears its own gate)

    # reproducibility
    seed: int = 7

    def replace(self, **kw) -> "EngineConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field: {sorted(unknown)[0]}")
        d = dict(d)
        if "xi_features" in d:
            d["xi_features"] = tuple(d["xi_features"])
        return cls(**d)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "EngineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
