"""Serve mode: one live teaching/execution session over HTTP + WebSocket.

Handlers never touch the execution loop's state directly: control enters
through a queue drained at cycle boundaries, and observers consume
broadcast snapshots.  Phases follow the teaching-sequence order: demos are
captured, segmentation builds the model, episodes run monitored, anomaly
confirmation gates recovery teaching.
"""

from __future__ import annotations

import json
import queue
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from . import graph as taskgraph
from .config import EngineConfig
from .data import ObservationSet, make_demonstration
from .pipeline import build_model, teach_recovery
from .runtime import run_episode
from .sim import (DT, FEATURE_NAMES, WORKSPACE, AnomalySpec, BoxPushWorld,
                  Scenario, world_from_scenario)

PHASES = ("idle", "demo-capture", "segmenting", "refining", "executing",
          "awaiting-recovery-demo", "awaiting-confirmation")


class Session:
    """Holds the model, captured demos, the live episode, and subscribers."""

    def __init__(self, model_path: str | None = None,
                 config: EngineConfig | None = None):
        self.id = uuid.uuid4().hex[:12]
        self.config = config or EngineConfig()
        self.graph = None
        self.model_path = model_path
        if model_path:
            self.graph = taskgraph.deserialize(model_path)
            self.config = self.graph.config()
        self.phase = "idle"
        self.demos: list = []
        self.pending_event: dict | None = None
        self.pending_skill: int | None = None
        self._confirm: queue.Queue = queue.Queue()
        self._control: queue.Queue = queue.Queue()
        self._subscribers: list = []
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self.last_outcome: str | None = None

    # -- phase & broadcast ------------------------------------------------
    def set_phase(self, phase: str) -> None:
        assert phase in PHASES
        self.phase = phase
        self.broadcast({"type": "phase", "phase": phase, "session": self.id})

    def broadcast(self, msg: dict) -> None:
        with self._lock:
            for q in self._subscribers:
                q.put(msg)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    # -- demonstrations ----------------------------------------------------
    def add_demo(self, frames: list) -> dict:
        """Resample a drawn trace through the simulator so features come from
        the same world the engine executes in."""
        if self.phase == "idle":
            self.set_phase("demo-capture")
        if self.phase not in ("demo-capture", "awaiting-recovery-demo"):
            raise ValueError(f"cannot accept demonstrations in phase '{self.phase}'")
        pts = np.array([f["s"] for f in frames], float)
        if len(pts) < 2:
            raise ValueError("a demonstration needs at least 2 points")
        lo, hi = np.asarray(WORKSPACE[0]), np.asarray(WORKSPACE[1])
        clipped = np.clip(pts, lo, hi)
        was_clipped = bool((clipped != pts).any())
        world = BoxPushWorld(seed=len(self.demos) + 1000, eef_start=clipped[0])
        ts, ss, fs = [0.0], [clipped[0].copy()], [world.features()]
        for nxt in clipped[1:]:
            world.step(nxt - world.state.eef)
            ts.append(world.state.cycle * DT)
            ss.append(world.state.eef.copy())
            fs.append(world.features())
        demo = make_demonstration(len(self.demos), ts, np.array(ss), None,
                                  np.array(fs), DT)
        self.demos.append(demo)
        return {"demo_id": demo.id, "n_frames": len(demo), "clipped": was_clipped}

    def corpus(self) -> ObservationSet:
        return ObservationSet(demos=tuple(self.demos), dt=DT,
                              feature_names=FEATURE_NAMES, workspace=WORKSPACE)

    def run_segmentation(self) -> dict:
        if not self.demos:
            raise ValueError("no demonstrations captured")
        self.set_phase("segmenting")
        try:
            graph, labels, info = build_model(self.corpus(), self.config)
            self.graph = graph
            if self.model_path:
                taskgraph.serialize(graph, self.model_path)
        finally:
            self.set_phase("idle")
        return {
            "skills": [graph.skills[i].to_dict() | {"labels": None}
                       for i in graph.nominal],
            "labels": {str(k): v.tolist() for k, v in labels.items()},
            "map_logprob": info["map_logprob"],
        }

    # -- execution ----------------------------------------------------------
    def start_episode(self, scenario: dict, monitor: bool = True) -> dict:
        if self.graph is None:
            raise ValueError("no model loaded")
        if self._thread is not None and self._thread.is_alive():
            raise ValueError("an episode is already running")
        sc = Scenario.from_dict(scenario)
        world = world_from_scenario(sc, home=self.graph.meta.get("home"))
        episode_id = uuid.uuid4().hex[:8]
        self.set_phase("executing")

        def oracle():
            self.set_phase("awaiting-confirmation")
            self.broadcast({"type": "confirm_request", "session": self.id})
            answer = self._confirm.get()  # blocks the episode thread
            return answer

        def on_cycle(rec, skill):
            th = skill.thresholds
            self.broadcast({
                "type": "cycle", **rec,
                "d_max": th.d_max if th else None,
                "log_p_min": th.log_p_min_s if th else None,
            })

        def control():
            try:
                return self._control.get_nowait()
            except queue.Empty:
                return None

        def runner():
            log = run_episode(self.graph, world, self.config,
                              monitor_enabled=monitor, oracle=oracle,
                              on_cycle=on_cycle, control=control)
            self.last_outcome = log.outcome
            for ev in log.events:
                self.broadcast({"type": "event", **ev})
            novel = [ev for ev in log.events
                     if ev["type"] == "anomaly" and ev.get("novel")
                     and ev.get("label") is not None]
            if novel and log.outcome == "anomaly_halt":
                self.pending_event = novel[-1]
                self.pending_skill = novel[-1]["skill_id"]
                self.set_phase("awaiting-recovery-demo")
            elif log.outcome == "refinement_halt":
                self.set_phase("refining")
            else:
                self.set_phase("idle")
            self.broadcast({"type": "episode_end", "outcome": log.outcome,
                            "episode": episode_id})
            if self.model_path and self.graph is not None:
                taskgraph.serialize(self.graph, self.model_path)

        self._thread = threading.Thread(target=runner, daemon=True)
        self._thread.start()
        return {"episode": episode_id}

    def stop_episode(self) -> None:
        self._control.put("stop")

    def inject(self, spec: dict) -> None:
        a = AnomalySpec(kind=spec["kind"], onset=int(spec.get("onset", 0)),
                        magnitude=float(spec.get("magnitude", 0.0)))
        self._control.put({"inject": a})

    def answer_confirmation(self, yes: bool) -> None:
        if self.phase != "awaiting-confirmation":
            raise ValueError("no confirmation pending")
        self.set_phase("executing")
        self._confirm.put(bool(yes))

    def add_recovery_demo(self, frames: list) -> dict:
        if self.phase != "awaiting-recovery-demo":
            raise ValueError("no recovery demonstration expected now")
        if self.pending_event is None:
            raise ValueError("no pending anomaly event")
        pts = np.array([f["s"] for f in frames], float)
        lo, hi = np.asarray(WORKSPACE[0]), np.asarray(WORKSPACE[1])
        clipped = np.clip(pts, lo, hi)
        world = BoxPushWorld(seed=4242, eef_start=clipped[0])
        ts, ss, fs = [0.0], [clipped[0].copy()], [world.features()]
        for nxt in clipped[1:]:
            world.step(nxt - world.state.eef)
            ts.append(world.state.cycle * DT)
            ss.append(world.state.eef.copy())
            fs.append(world.features())
        demo = make_demonstration(0, ts, np.array(ss), None, np.array(fs), DT)
        oset = ObservationSet(demos=(demo,), dt=DT, feature_names=FEATURE_NAMES,
                              workspace=WORKSPACE)
        self.set_phase("segmenting")
        try:
            teach_recovery(self.graph, self.pending_skill,
                           self.pending_event["label"], oset, self.config)
            if self.model_path:
                taskgraph.serialize(self.graph, self.model_path)
        finally:
            self.pending_event = None
            self.pending_skill = None
            self.set_phase("idle")
        return {"ok": True}

    def summary(self) -> dict:
        if self.graph is None:
            return {"session": self.id, "phase": self.phase, "model": None,
                    "n_demos": len(self.demos)}
        g = self.graph
        return {
            "session": self.id,
            "phase": self.phase,
            "n_demos": len(self.demos),
            "model": {
                "nominal": list(g.nominal),
                "root": g.root,
                "skills": [
                    {"id": sid, "rows": g.skills[sid].n_rows,
                     "d_max": g.skills[sid].thresholds.d_max if g.skills[sid].thresholds else None,
                     "labels": g.skills[sid].memory.label_set}
                    for sid in sorted(g.skills)
                ],
                "recovery": {str(k): {str(l): v for l, v in b.items()}
                             for k, b in g.recovery.items()},
            },
            "last_outcome": self.last_outcome,
        }

    def graph_view(self) -> dict:
        if self.graph is None:
            raise ValueError("no model loaded")
        g = self.graph
        nodes = [{"id": sid, "kind": "nominal" if sid in g.nominal else "recovery",
                  "mu_g": g.skills[sid].mu_g.tolist()}
                 for sid in sorted(g.skills)]
        edges = [{"from": a, "to": b, "kind": "nominal"}
                 for a, b in zip(g.nominal, g.nominal[1:])]
        for sid, branches in g.recovery.items():
            for label, chain in branches.items():
                prev = sid
                for rid in chain:
                    edges.append({"from": prev, "to": rid, "kind": "recovery",
                                  "label": label})
                    prev = rid
        return {"nodes": nodes, "edges": edges, "root": g.root}


def _check_session(session: Session, body: dict | None) -> None:
    if body and body.get("session") and body["session"] != session.id:
        raise HTTPException(status_code=409, detail="stale session id")


def create_app(session: Session) -> FastAPI:
    app = FastAPI(title="lfdkit session")

    def guard(fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except ValueError as e:
            raise HTTPException(status_code=409, detail=str(e)) from e

    @app.get("/v1/session")
    def get_session():
        return {"session": session.id, "phase": session.phase}

    @app.get("/v1/model/summary")
    def get_summary():
        return session.summary()

    @app.get("/v1/model/graph")
    def get_graph():
        return guard(session.graph_view)

    @app.post("/v1/demos")
    def post_demo(body: dict):
        _check_session(session, body)
        return guard(session.add_demo, body["frames"])

    @app.post("/v1/segment")
    def post_segment(body: dict | None = None):
        _check_session(session, body)
        return guard(session.run_segmentation)

    @app.post("/v1/episode/start")
    def post_start(body: dict):
        _check_session(session, body)
        return guard(session.start_episode, body.get("scenario", {"seed": 0}),
                     body.get("monitor", True))

    @app.post("/v1/episode/stop")
    def post_stop(body: dict | None = None):
        _check_session(session, body)
        session.stop_episode()
        return {"ok": True}

    @app.post("/v1/inject")
    def post_inject(body: dict):
        _check_session(session, body)
        return guard(lambda: session.inject(body) or {"ok": True})

    @app.post("/v1/confirm")
    def post_confirm(body: dict):
        _check_session(session, body)
        return guard(lambda: session.answer_confirmation(body["answer"]) or {"ok": True})

    @app.post("/v1/recovery-demo")
    def post_recovery(body: dict):
        _check_session(session, body)
        return guard(session.add_recovery_demo, body["frames"])

    @app.websocket("/v1/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        q = session.subscribe()
        import asyncio

        try:
            while True:
                try:
                    msg = q.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.002)
                    continue
                await ws.send_text(json.dumps(msg))
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            session.unsubscribe(q)

    return app
