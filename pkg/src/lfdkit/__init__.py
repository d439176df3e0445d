"""Learning-from-demonstration engine.

Segments demonstrated trajectories into skills with a Bayesian nonparametric
sampler fusing subgoal-driven intention recognition and feature clustering,
organizes the skills into an extensible task graph, and executes them in a
bundled 2D pushing simulator with mixture-regression motion generation,
uncertainty-aware anomaly detection, and demonstration-driven recovery.
"""

from .config import EngineConfig

__all__ = ["EngineConfig"]
__version__ = "0.1.0"
