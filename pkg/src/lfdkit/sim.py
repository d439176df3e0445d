"""Deterministic 2D box-pushing world.

A point end-effector moves on a [0,1] x [0,1] m table; a square box sits in
its path and can be pushed kinematically over the table edge at x = 0.7.
Contact produces a constant-magnitude reaction force with sensor noise.
Scripted demonstrations traverse four phases (approach, push, forward to a
turning point, retract) and carry per-frame ground-truth labels.

Fault injection covers a vanished contact force, an immovable box with
force buildup, and an added lateral force.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import ObservationSet, make_demonstration

# world constants; chosen to give feature scales similar to the task they model
WORKSPACE = ((0.0, 0.0), (1.0, 1.0))
EDGE_X = 0.7
BOX_SIDE = 0.16
BOX_START = (0.5, 0.5)
K_PUSH = 5.0            # N, contact reaction magnitude
FORCE_NOISE = 0.2       # N, sensor noise while in contact
SPIKE_GAIN = 200.0      # N per meter of blocked push (2 N per cm)
DT = 0.01
SPEED = 0.4             # m/s nominal end-effector speed
FEATURE_NAMES = ("dist_box", "dist_edge", "force")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str            # force_drop | force_spike | external_push
    onset: int           # cycle index
    magnitude: float = 0.0

    KINDS = ("force_drop", "force_spike", "external_push")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown anomaly kind '{self.kind}'")
        if self.onset < 0:
            raise ValueError("onset must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "onset": self.onset, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalySpec":
        return cls(kind=d["kind"], onset=int(d["onset"]),
                   magnitude=float(d.get("magnitude", 0.0)))


@dataclass(frozen=True)
class Scenario:
    seed: int
    variation: float = 0.0
    anomalies: tuple = ()

    def to_dict(self) -> dict:
        return {"seed": self.seed, "variation": self.variation,
                "anomalies": [a.to_dict() for a in self.anomalies]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(seed=int(d["seed"]), variation=float(d.get("variation", 0.0)),
                   anomalies=tuple(AnomalySpec.from_dict(a) for a in d.get("anomalies", ())))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class WorldState:
    eef: np.ndarray
    box: np.ndarray
    box_side: float
    edge_x: float
    box_on_table: bool
    force: np.ndarray     # 2D force vector acting on the EEF
    cycle: int


HOME = (0.15, 0.28)      # nominal end-effector home position
EXEC_START_JITTER = 0.01  # executions launch from the home region; scripted
                          # demonstrations explore a wider start spread


class BoxPushWorld:
    """One world per session; advanced only by its owning loop."""

    def __init__(self, seed: int = 0, eef_start=(0.15, 0.28)):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.state = WorldState(
            eef=np.asarray(eef_start, float).copy(),
            box=np.asarray(BOX_START, float).copy(),
            box_side=BOX_SIDE,
            edge_x=EDGE_X,
            box_on_table=True,
            force=np.zeros(2),
            cycle=0,
        )
        self._anomalies: list = []
        self._spike_depth = 0.0
        self._contact_face: int | None = None

    def inject(self, spec: AnomalySpec) -> None:
        self._anomalies.append(spec)

    def _active(self, kind: str) -> AnomalySpec | None:
        for a in self._anomalies:
            if a.kind == kind and self.state.cycle >= a.onset:
                return a
        return None

    def features(self) -> np.ndarray:
        st = self.state
        d_box = float(np.linalg.norm(st.eef - st.box))
        d_edge = abs(float(st.eef[0]) - st.edge_x)
        return np.array([d_box, d_edge, float(np.linalg.norm(st.force))])

    def step(self, displacement, force_cmd: float = 0.0) -> tuple:
        """Advance one cycle.  Returns (WorldState, measured xi).

        xi = (realized displacement (2,), dist_box, dist_edge, |force|).
        The commanded force is applied at the contact only; the measured
        force comes from the contact model, not the command.
        """
        st = self.state
        displacement = np.asarray(displacement, float)
        if not np.isfinite(displacement).all():
            raise ValueError("command must be finite")
        lo, hi = np.asarray(WORKSPACE[0]), np.asarray(WORKSPACE[1])
        before = st.eef.copy()
        target = np.clip(st.eef + displacement, lo, hi)

        force = np.zeros(2)
        spike = self._active("force_spike")
        half = st.box_side / 2
        bl, bh = st.box - half, st.box + half
        inside = (bl[0] < target[0] < bh[0]) and (bl[1] < target[1] < bh[1])
        if st.box_on_table and inside:
            # the entry face takes the push (minimal penetration on first
            # contact); established contact sticks to its face so grazing a
            # corner cannot flip the push direction mid-stroke
            pen = np.array([target[0] - bl[0], bh[0] - target[0],
                            target[1] - bl[1], bh[1] - target[1]])
            if self._contact_face is None:
                self._contact_face = int(np.argmin(pen))
            face = self._contact_face
            push_dir = [np.array([1.0, 0]), np.array([-1.0, 0]),
                        np.array([0, 1.0]), np.array([0, -1.0])][face]
            depth = float(pen[face])
            noise = self.rng.normal(0.0, FORCE_NOISE)
            if spike is not None:
                # box immobilized: EEF blocked at the face, force builds up
                self._spike_depth += depth
                target = target - push_dir * depth
                force = -push_dir * (K_PUSH + SPIKE_GAIN * self._spike_depth + noise)
            else:
                st.box = st.box + push_dir * depth
                force = -push_dir * (K_PUSH + noise)
                if st.box[0] > st.edge_x:
                    st.box_on_table = False
        else:
            self._contact_face = None
        if self._active("force_drop") is not None:
            force = np.zeros(2)
        ext = self._active("external_push")
        if ext is not None:
            force = force + np.array([0.0, ext.magnitude])

        st.eef = target
        st.force = force
        st.cycle += 1
        realized = st.eef - before
        xi = np.concatenate([realized, self.features()])
        return st, xi


def _phase_waypoints(rng: np.random.Generator, variation: float) -> dict:
    """Task geometry with jitter scaled by the variation parameter.

    Every phase is a single straight stroke so a small mixture can model
    each skill's dynamics; the approach aligns by heading straight at the
    push height on the box's left face.
    """
    jit = lambda s: rng.normal(0.0, s * variation, size=2)  # noqa: E731
    # push height varies but must stay on the box face
    push_y = 0.50 + float(np.clip(rng.normal(0.0, 0.02 * variation), -0.035, 0.035))
    return {
        "start": np.array([0.15, 0.28]) + jit(0.03),
        "push_y": push_y,
        "turn": np.array([0.86, 0.50]) + jit(0.02),
        "retreat": np.array([0.55, 0.63]) + jit(0.02),
    }


def scripted_demo(seed: int, variation: float = 0.0, dt: float = DT,
                  demo_id: int = 0) -> tuple:
    """Generate one demonstration with per-frame ground-truth labels 1-4.

    Phase boundaries coincide with contact-on, contact-off (box falls), and
    the turning point.  Returns (Demonstration, labels array).
    """
    rng = np.random.default_rng(seed)
    wp = _phase_waypoints(rng, variation)
    world = BoxPushWorld(seed=seed + 104729, eef_start=wp["start"])
    step_len = SPEED * dt

    ts, ss, fs, labels = [], [], [], []

    def record(label: int) -> None:
        ts.append(world.state.cycle * dt)
        ss.append(world.state.eef.copy())
        fs.append(world.features())
        labels.append(label)

    def walk_to(target, label, stop=None, max_steps=2000) -> None:
        for _ in range(max_steps):
            if stop is not None and stop():
                return
            delta = target - world.state.eef
            dist = np.linalg.norm(delta)
            if stop is None and dist < step_len / 2:
                return
            step = delta if dist <= step_len else delta / dist * step_len
            world.step(step)
            record(label)

    def dwell(label, cycles=6) -> None:
        # demonstrators pause briefly at subgoals
        for _ in range(cycles):
            world.step(np.zeros(2))
            record(label)

    record(1)
    # drive straight into the box's left face until contact registers
    face = np.array([world.state.box[0] - BOX_SIDE / 2, wp["push_y"]])
    walk_to(face + np.array([0.02, 0.0]), 1,
            stop=lambda: np.linalg.norm(world.state.force) > 0)
    # relabel the first contact frame: boundaries coincide with contact-on
    if labels and np.linalg.norm(world.state.force) > 0:
        labels[-1] = 2
    # push until the box tips over the edge; the tipping frame keeps label 2
    walk_to(np.array([1.0, wp["push_y"]]), 2,
            stop=lambda: not world.state.box_on_table)
    walk_to(wp["turn"], 3)
    dwell(3)
    walk_to(wp["retreat"], 4)
    dwell(4)

    demo = make_demonstration(demo_id, ts, np.array(ss), None, np.array(fs), dt)
    return demo, np.asarray(labels, int)


def scripted_recovery_demo(seed: int, start, box_pos, variation: float = 0.0,
                           dt: float = DT, demo_id: int = 0,
                           fault: str = "force_drop") -> tuple:
    """Demonstrate recovering from a lost-contact fault mid-push.

    From the halt state the demonstrator retracts a little, re-approaches
    the box's current face, and pushes it over the edge.  The fault stays
    active (the contact force reads zero), so the recovery skill's expected
    features reflect the faulted regime.  Returns (Demonstration, labels).
    """
    rng = np.random.default_rng(seed)
    jit = lambda s: rng.normal(0.0, s * variation, size=2)  # noqa: E731
    start = np.asarray(start, float) + jit(0.01)
    world = BoxPushWorld(seed=seed + 31337, eef_start=start)
    world.state.box = np.asarray(box_pos, float).copy()
    if fault:
        world.inject(AnomalySpec(kind=fault, onset=0))
    step_len = SPEED * dt
    ts, ss, fs, labels = [], [], [], []

    def record(label):
        ts.append(world.state.cycle * dt)
        ss.append(world.state.eef.copy())
        fs.append(world.features())
        labels.append(label)

    def walk_to(target, label, stop=None, max_steps=1000):
        for _ in range(max_steps):
            if stop is not None and stop():
                return
            delta = target - world.state.eef
            dist = np.linalg.norm(delta)
            if stop is None and dist < step_len / 2:
                return
            step = delta if dist <= step_len else delta / dist * step_len
            world.step(step)
            record(label)

    record(1)
    back = start + np.array([-0.05, 0.0])
    walk_to(back, 1)
    face_y = float(world.state.box[1]) + float(rng.normal(0, 0.01 * variation))
    face = np.array([world.state.box[0] - world.state.box_side / 2, face_y])
    walk_to(face - np.array([0.03, 0.0]), 1)
    # re-push the box over the edge; the fault keeps the force reading at 0
    walk_to(np.array([1.0, face_y]), 2,
            stop=lambda: not world.state.box_on_table)
    for _ in range(6):
        world.step(np.zeros(2))
        record(2)
    demo = make_demonstration(demo_id, ts, np.array(ss), None, np.array(fs), dt)
    return demo, np.asarray(labels, int)


def world_from_scenario(scenario: Scenario, home=None) -> BoxPushWorld:
    """World for an execution episode: home-region start, queued anomalies.

    `home` is the launch point (a task model's taught start region mean);
    defaults to the nominal home constant.
    """
    rng = np.random.default_rng(scenario.seed)
    base = np.asarray(home if home is not None else HOME, float)
    start = base + rng.normal(0.0, EXEC_START_JITTER * scenario.variation, 2)
    world = BoxPushWorld(seed=scenario.seed + 7919, eef_start=start)
    for spec in scenario.anomalies:
        world.inject(spec)
    return world


def make_corpus(seeds, variation: float, dt: float = DT) -> tuple:
    """Scripted demonstrations for each seed.  Returns (ObservationSet, labels)."""
    demos, labels = [], {}
    for i, seed in enumerate(seeds):
        demo, lab = scripted_demo(seed, variation, dt, demo_id=i)
        demos.append(demo)
        labels[i] = lab
    oset = ObservationSet(demos=tuple(demos), dt=dt, feature_names=FEATURE_NAMES,
                          workspace=WORKSPACE)
    return oset, labels
