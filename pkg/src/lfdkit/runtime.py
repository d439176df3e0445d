"""Per-cycle execution: command generation, two-step anomaly detection with
debounce, subgoal monitoring, anomaly-type determination, and episode
orchestration against the simulator.

The two-step monitor first gates on epistemic confidence (input-marginal
density against its calibrated minimum) and only then applies the
Mahalanobis test (aleatoric deviation against the calibrated maximum).
Either flag must persist for a full debounce run of consecutive cycles
before a trigger fires.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .data import Frame, RefinementSet
from .graph import TaskGraph, next_after_recovery
from .mixture import condition, fit_gmm, mahalanobis
from .sim import BoxPushWorld
from .skills import AnomalyMemory, SkillModel


@dataclass
class MonitorVerdict:
    d: float
    log_p_s: float
    anomaly_flag: bool
    confident_flag: bool
    anomaly_run: int
    notconf_run: int


@dataclass
class AnomalyEvent:
    skill_id: int
    onset_cycle: int
    window: np.ndarray       # (epsilon_cycles, out_dim) measured outputs
    label: int | None = None
    novel: bool = False
    queried: bool = False
    confirmed: bool | None = None
    below_support: int = 0   # rows under the anomaly-memory density floor


class MonitorState:
    """Debounce counters and the rolling window of flagged rows."""

    def __init__(self, epsilon_cycles: int):
        self.eps = epsilon_cycles
        self.reset()

    def reset(self) -> None:
        self.anomaly_run = 0
        self.notconf_run = 0
        self.window: list = []


def step_command(skill: SkillModel, s: np.ndarray) -> np.ndarray:
    """Expected output at state s: the conditioned mixture mean."""
    return condition(skill.mixture, np.asarray(s, float)).mu


def split_command(xi: np.ndarray) -> tuple:
    """(displacement, force) parts of an output vector by feature layout."""
    return xi[:2], float(xi[-1])


def monitor(skill: SkillModel, s: np.ndarray, xi: np.ndarray,
            mstate: MonitorState) -> tuple:
    """One monitoring cycle.  Returns (MonitorVerdict, trigger or None).

    trigger is "anomaly" after epsilon consecutive confident-anomalous
    cycles and "refinement" after epsilon consecutive not-confident cycles.
    The anomaly test is only acted upon when the confidence gate passes.
    """
    cond = condition(skill.mixture, np.asarray(s, float))
    d = mahalanobis(cond, np.asarray(xi, float))
    th = skill.thresholds
    confident = cond.log_p_s >= th.log_p_min_s
    anomalous = d > th.d_max
    trigger = None
    if confident and anomalous:
        mstate.anomaly_run += 1
        mstate.notconf_run = 0
        mstate.window.append(np.asarray(xi, float))
        if len(mstate.window) > mstate.eps:
            mstate.window.pop(0)
        if mstate.anomaly_run >= mstate.eps:
            trigger = "anomaly"
    elif not confident:
        mstate.notconf_run += 1
        mstate.anomaly_run = 0
        mstate.window.clear()
        if mstate.notconf_run >= mstate.eps:
            trigger = "refinement"
    else:
        mstate.anomaly_run = 0
        mstate.notconf_run = 0
        mstate.window.clear()
    verdict = MonitorVerdict(d=d, log_p_s=cond.log_p_s, anomaly_flag=anomalous,
                             confident_flag=confident,
                             anomaly_run=mstate.anomaly_run,
                             notconf_run=mstate.notconf_run)
    return verdict, trigger


def subgoal_reached(skill: SkillModel, s: np.ndarray) -> bool:
    """True iff the state's subgoal-region distance is within the maximum
    distance of the skill's inferred per-demo subgoals."""
    return skill.subgoal_distance(s) <= skill.subgoal_dmax


def _refit_memory(memory: AnomalyMemory, cfg: EngineConfig) -> None:
    rows = memory.rows()
    m = min(cfg.anomaly_components, len(memory.windows))
    memory.mixture = fit_gmm(rows, m, reg=cfg.gmm_reg, seed=cfg.seed,
                             n_in=rows.shape[1])
    dens = np.array([memory.mixture.input_marginal_log(r) for r in rows])
    memory.log_p_min_xi = float(dens.min())


def _fit_classifier(memory: AnomalyMemory, cfg: EngineConfig):
    labels = sorted(set(memory.labels))
    if len(labels) == 1:
        only = labels[0]
        return lambda rows: np.full(len(rows), only)
    from sklearn.svm import LinearSVC

    x = np.concatenate([w[-cfg.classifier_window:] for w in memory.windows])
    y = np.concatenate([
        np.full(len(w[-cfg.classifier_window:]), lab)
        for w, lab in zip(memory.windows, memory.labels)
    ])
    clf = LinearSVC(random_state=0, tol=1e-5)
    clf.fit(x, y)
    return clf.predict


def classify_anomaly(event: AnomalyEvent, memory: AnomalyMemory,
                     cfg: EngineConfig, oracle=None) -> AnomalyEvent:
    """Determine the anomaly type of an event window and update the memory.

    First-ever anomaly: label 1, no query.  A window mostly below the
    anomaly-memory density floor is treated as potentially novel and the
    oracle (user) is asked to confirm; "yes" registers a fresh label and
    calls for a recovery demonstration, "no" falls back to the majority
    classifier vote.  Without an oracle the event stays unresolved and the
    memory untouched.
    """
    window = event.window
    if not memory.windows:
        memory.windows.append(window.copy())
        memory.labels.append(1)
        _refit_memory(memory, cfg)
        event.label = 1
        event.novel = True
        return event
    dens = np.array([memory.mixture.input_marginal_log(r) for r in window])
    c = int(np.sum(dens < memory.log_p_min_xi))
    event.below_support = c
    if c > len(window) / 2:
        event.queried = True
        answer = oracle() if oracle is not None else None
        if answer is None:
            event.novel = True
            event.confirmed = None
            return event  # unresolved: halts execution, memory untouched
        event.confirmed = bool(answer)
        if answer:
            label = max(memory.labels) + 1
            event.novel = True
        else:
            predict = _fit_classifier(memory, cfg)
            votes = predict(window[-cfg.classifier_window:])
            vals, counts = np.unique(votes, return_counts=True)
            label = int(vals[np.argmax(counts)])
            event.novel = False
    else:
        predict = _fit_classifier(memory, cfg)
        votes = predict(window[-cfg.classifier_window:])
        vals, counts = np.unique(votes, return_counts=True)
        label = int(vals[np.argmax(counts)])
        event.novel = False
    memory.windows.append(window.copy())
    memory.labels.append(label)
    _refit_memory(memory, cfg)
    event.label = label
    return event


@dataclass
class EpisodeLog:
    cycles: list = field(default_factory=list)
    events: list = field(default_factory=list)
    outcome: str = "incomplete"

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            for rec in self.cycles:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"events": self.events, "outcome": self.outcome}) + "\n")

    @classmethod
    def load(cls, path: str) -> "EpisodeLog":
        cycles = []
        tail = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                if "events" in doc:
                    tail = doc
                else:
                    cycles.append(doc)
        if tail is None:
            raise ValueError(f"{path}: missing trailing events block")
        return cls(cycles=cycles, events=tail["events"], outcome=tail["outcome"])

    def refinement_set(self, dt: float) -> RefinementSet:
        """Turn the logged cycles into skill-labeled refinement rows."""
        entries = []
        for rec in self.cycles:
            xi = np.asarray(rec["xi_meas"], float)
            entries.append((rec["skill_id"], Frame(
                t=rec["n"] * dt, s=np.asarray(rec["s"], float),
                a=xi[:2], f=np.asarray(rec["f"], float),
            )))
        return RefinementSet(entries=tuple(entries))


# outcome -> CLI exit code
EXIT_CODES = {"success": 0, "anomaly_halt": 2, "timeout": 3, "refinement_halt": 4}


def _ready(nxt: SkillModel, cur: SkillModel, s: np.ndarray,
           margin: float) -> bool:
    """Whether a successor can take over at state s.

    True when the successor's input marginal clears its own calibrated gate
    or comes within e^margin of the active skill's: skill supports overlap
    at genuine boundaries, while a support gap keeps the current skill
    driving."""
    s = np.asarray(s, float)
    lpn = nxt.mixture.input_marginal_log(s)
    if lpn >= nxt.thresholds.log_p_min_s:
        return True
    return lpn >= cur.mixture.input_marginal_log(s) - margin


def run_episode(graph: TaskGraph, world: BoxPushWorld, cfg: EngineConfig,
                monitor_enabled: bool = True, oracle=None, on_cycle=None,
                control=None) -> EpisodeLog:
    """Drive the task graph against the world until success or a halt.

    Starts at the graph root; per cycle: command from the active skill's
    conditioned mean, world step, monitoring, subgoal check.  Subgoal
    attainment advances the nominal chain (or finishes a recovery branch and
    re-enters the nominal flow at the best-supported skill).  An anomaly
    trigger stops motion, classifies the window, and either routes to a
    recovery branch or halts.  on_cycle (if given) receives each record;
    control (if given) is polled every cycle and may return "stop" or an
    injection spec applied at the cycle boundary.
    """
    log = EpisodeLog()
    mode = "nominal"
    nominal_idx = 0
    recovery_chain: list = []
    recovery_pos = 0
    skill = graph.skill(graph.nominal[0])
    mstate = MonitorState(cfg.epsilon_cycles)
    subgoal_latched = False  # postcondition attained at some cycle of the skill
    from .graph import xi_columns

    xi_cols = [2 + i for i in xi_columns(graph.meta["feature_names"], cfg)]

    def activate(new_skill: SkillModel) -> None:
        nonlocal skill, subgoal_latched
        skill = new_skill
        subgoal_latched = False
        mstate.reset()

    for n in range(cfg.max_cycles):
        if control is not None:
            cmd = control()
            if cmd == "stop":
                log.outcome = "stopped"
                break
            if isinstance(cmd, dict) and cmd.get("inject"):
                world.inject(cmd["inject"])
                log.events.append({"type": "inject", "cycle": n,
                                   "kind": cmd["inject"].kind})
        s = world.state.eef.copy()
        xi_cmd = step_command(skill, s)
        disp, force = split_command(xi_cmd)
        _, readout = world.step(disp, force)
        # runtime output vector: realized displacement + interaction features;
        # the full feature readout is kept for refinement rows
        xi_meas = np.concatenate([readout[:2]] + [readout[c:c + 1] for c in xi_cols])
        rec = {"n": n, "s": s.tolist(), "xi_cmd": xi_cmd.tolist(),
               "xi_meas": xi_meas.tolist(), "f": readout[2:].tolist(),
               "skill_id": skill.id}
        trigger = None
        if monitor_enabled:
            verdict, trigger = monitor(skill, s, xi_meas, mstate)
            rec["D"] = verdict.d
            rec["log_p_s"] = verdict.log_p_s
            rec["flags"] = {"confident": verdict.confident_flag,
                            "anomaly": verdict.anomaly_flag}
        else:
            rec["D"] = None
            rec["log_p_s"] = None
            rec["flags"] = {"confident": True, "anomaly": False}
        log.cycles.append(rec)
        if on_cycle is not None:
            on_cycle(rec, skill)

        if trigger == "anomaly":
            window = np.array(mstate.window)
            event = AnomalyEvent(skill_id=skill.id,
                                 onset_cycle=n - cfg.epsilon_cycles + 1,
                                 window=window)
            event = classify_anomaly(event, skill.memory, cfg, oracle)
            log.events.append({
                "type": "anomaly", "cycle": n, "skill_id": skill.id,
                "onset": event.onset_cycle, "label": event.label,
                "novel": event.novel, "queried": event.queried,
                "confirmed": event.confirmed,
                "below_support": event.below_support,
            })
            branch = None
            if event.label is not None and mode == "nominal" and event.confirmed is not False:
                branch = graph.branch(skill.id, event.label)
            if branch:
                log.events.append({"type": "recovery_start", "cycle": n,
                                   "skill_id": skill.id, "label": event.label,
                                   "chain": list(branch)})
                mode = "recovery"
                recovery_chain = list(branch)
                recovery_pos = 0
                activate(graph.skill(recovery_chain[0]))
                continue
            log.outcome = "anomaly_halt"
            break
        if trigger == "refinement":
            log.events.append({"type": "refinement", "cycle": n,
                               "skill_id": skill.id})
            log.outcome = "refinement_halt"
            break

        s_now = world.state.eef
        if subgoal_reached(skill, s_now):
            log.events.append({"type": "subgoal", "cycle": n,
                               "skill_id": skill.id})
            if mode == "nominal":
                if skill.id == graph.terminal:
                    log.outcome = "success"
                    break
                nominal_idx += 1
                activate(graph.skill(graph.nominal[nominal_idx]))
            else:
                if recovery_pos + 1 < len(recovery_chain):
                    recovery_pos += 1
                    activate(graph.skill(recovery_chain[recovery_pos]))
                else:
                    nxt_id = next_after_recovery(graph, s_now)
                    log.events.append({"type": "recovery_end", "cycle": n,
                                       "resume_skill": nxt_id})
                    if nxt_id is None:
                        log.outcome = "anomaly_halt"
                        break
                    mode = "nominal"
                    nominal_idx = graph.nominal.index(nxt_id)
                    activate(graph.skill(nxt_id))
    else:
        log.outcome = "timeout"
    return log
