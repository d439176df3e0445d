"""
Incremental recovery teaching
=============================

The full incremental loop: a fault halts execution and self-labels (first
occurrence), a recovery demonstration is segmented and appended as a branch,
and the next occurrence of the same fault classifies to the known label and
recovers autonomously, resuming the nominal flow.
"""

import numpy as np

from lfdkit.config import EngineConfig
from lfdkit.data import ObservationSet, RefinementSet
from lfdkit.graph import merge_refinement
from lfdkit.pipeline import build_model, teach_recovery
from lfdkit.runtime import run_episode
from lfdkit.sim import (AnomalySpec, Scenario, make_corpus,
                        scripted_recovery_demo, world_from_scenario)

cfg = EngineConfig().replace(iterations=300, burn_in=150, chains=2)

print("building and refining the task model...")
oset, _ = make_corpus([21, 22, 23], variation=1.0)
graph, _, _ = build_model(oset, cfg)
home = graph.meta["home"]
entries = []
for seed in (201, 202, 203):
    log = run_episode(graph, world_from_scenario(Scenario(seed=seed, variation=1.0),
                                                 home=home), cfg,
                      monitor_enabled=False)
    entries.extend(log.refinement_set(oset.dt).entries)
merge_refinement(graph, RefinementSet(entries=tuple(entries)))

probe = run_episode(graph, world_from_scenario(Scenario(seed=299, variation=1.0),
                                               home=home), cfg)
contact = next(r["n"] for r in probe.cycles if r["f"][2] > 1.0)
fault = (AnomalySpec("force_drop", contact + 10, 0.0),)

print("first fault occurrence: detection, self-labeling, halt...")
log1 = run_episode(graph, world_from_scenario(
    Scenario(seed=420, variation=1.0, anomalies=fault), home=home), cfg)
ev = next(e for e in log1.events if e["type"] == "anomaly")
print(f"  outcome {log1.outcome}, label {ev['label']} in skill {ev['skill_id']}")

print("teaching a recovery branch from demonstrations under the fault...")
halt_state = np.asarray(log1.cycles[-1]["s"])
push_cycles = len([r for r in log1.cycles if r["f"][2] > 1.0])
box_x = min(0.5 + (push_cycles + 2) * 0.004, 0.68)
demos = [scripted_recovery_demo(seed, halt_state, [box_x, 0.5], variation=1.0,
                                demo_id=i)[0]
         for i, seed in enumerate((900, 901))]
rec_oset = ObservationSet(demos=tuple(demos), dt=oset.dt,
                          feature_names=oset.feature_names,
                          workspace=oset.workspace)
teach_recovery(graph, ev["skill_id"], ev["label"], rec_oset,
               cfg.replace(iterations=200, burn_in=100, chains=1))
print(f"  branch for (skill {ev['skill_id']}, label {ev['label']}): "
      f"{graph.branch(ev['skill_id'], ev['label'])}")

print("second fault occurrence: autonomous recovery...")
log2 = run_episode(graph, world_from_scenario(
    Scenario(seed=421, variation=1.0, anomalies=fault), home=home), cfg)
ev2 = next(e for e in log2.events if e["type"] == "anomaly")
end = next(e for e in log2.events if e["type"] == "recovery_end")
print(f"  label {ev2['label']} (queried: {ev2['queried']}), recovery ran, "
      f"resumed at skill {end['resume_skill']}, outcome {log2.outcome}")
