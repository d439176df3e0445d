"""Command-line surface for the full workflow.

Exit codes for `execute`: 0 success, 2 anomaly halt, 3 timeout,
4 refinement halt.  Input validation failures exit 1 with a named error.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from . import graph as taskgraph
from .config import EngineConfig
from .data import load_corpus, load_labels, save_corpus, save_labels
from .metrics import anom_report, seg_report
from .pipeline import build_model, segmentation_result_doc, teach_recovery
from .runtime import EXIT_CODES, EpisodeLog, run_episode
from .sim import AnomalySpec, Scenario, make_corpus, world_from_scenario


def _load_config(path: str | None, **overrides) -> EngineConfig:
    cfg = EngineConfig.load(path) if path else EngineConfig()
    live = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**live) if live else cfg


def _fail(msg: str) -> None:
    raise click.ClickException(msg)


@click.group()
def main():
    """Learning-from-demonstration engine for the 2D pushing task."""


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--demos", "n_demos", default=3, show_default=True)
@click.option("--labels-out", default=None, type=click.Path(),
              help="Ground-truth label file (default: OUT + '.labels.json').")
def demo(scenario_path, out_path, n_demos, labels_out):
    """Generate scripted demonstrations into a corpus file."""
    sc = Scenario.load(scenario_path)
    oset, labels = make_corpus([sc.seed + i for i in range(n_demos)], sc.variation)
    save_corpus(oset, out_path)
    save_labels(labels, labels_out or out_path + ".labels.json")
    click.echo(f"wrote {n_demos} demos, {oset.n_frames} frames to {out_path}")


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["bngirl", "bngmm", "bnirl"]),
              default="bngirl", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--burn-in", type=int, default=None)
@click.option("--chains", type=int, default=None)
@click.option("--result-out", default=None, type=click.Path(),
              help="Segmentation result file (default: OUT + '.seg.json').")
@click.option("--quiet", is_flag=True)
def segment(corpus_path, config_path, out_path, mode, seed, iterations,
            burn_in, chains, result_out, quiet):
    """Run the segmentation sampler and write a task model plus labels."""
    cfg = _load_config(config_path, seed=seed, iterations=iterations,
                       burn_in=burn_in, chains=chains)
    oset = load_corpus(corpus_path)

    def progress(t, total, k, lp):
        if not quiet and t % max(total // 10, 1) == 0:
            click.echo(f"  sweep {t}/{total}  K={k}  score={lp:.1f}", err=True)

    graph, labels, info = build_model(oset, cfg, mode=mode, progress=progress)
    taskgraph.serialize(graph, out_path)
    doc = segmentation_result_doc(graph, labels, info, cfg)
    with open(result_out or out_path + ".seg.json", "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    click.echo(f"wrote task model ({len(graph.nominal)} skills, mode {mode}) to {out_path}")


def _parse_inject(text: str) -> AnomalySpec:
    parts = text.split(":")
    if len(parts) < 2:
        _fail("--inject expects kind:onset[:magnitude]")
    try:
        kind, onset = parts[0], int(parts[1])
        magnitude = float(parts[2]) if len(parts) > 2 else 0.0
        return AnomalySpec(kind=kind, onset=onset, magnitude=magnitude)
    except ValueError as e:
        _fail(f"bad --inject value: {e}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--inject", "inject_spec", default=None,
              help="Extra anomaly, kind:onset[:magnitude].")
@click.option("--no-monitor", is_flag=True,
              help="Collect data without anomaly detection (refinement runs).")
def execute(model_path, scenario_path, log_path, inject_spec, no_monitor):
    """Run one monitored episode; exit code reflects the outcome."""
    graph = taskgraph.deserialize(model_path)
    sc = Scenario.load(scenario_path)
    if inject_spec:
        sc = Scenario(seed=sc.seed, variation=sc.variation,
                      anomalies=sc.anomalies + (_parse_inject(inject_spec),))
    cfg = graph.config()
    world = world_from_scenario(sc, home=graph.meta.get("home"))
    log = run_episode(graph, world, cfg, monitor_enabled=not no_monitor)
    log.save(log_path)
    taskgraph.serialize(graph, model_path)  # anomaly memory may have grown
    phase = None
    for ev in log.events:
        if ev["type"] == "anomaly":
            phase = ("awaiting-confirmation" if ev["queried"] and ev["confirmed"] is None
                     else "awaiting-recovery-demo")
    if phase:
        with open(model_path + ".session.json", "w") as fh:
            json.dump({"phase": phase, "events": log.events}, fh)
            fh.write("\n")
    click.echo(f"outcome: {log.outcome} ({len(log.cycles)} cycles)")
    sys.exit(EXIT_CODES.get(log.outcome, 1))


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="Output model path (default: in place).")
def refine(model_path, log_path, out_path):
    """Merge an episode log's rows as refinement data and recalibrate."""
    graph = taskgraph.deserialize(model_path)
    log = EpisodeLog.load(log_path)
    ref = log.refinement_set(graph.meta["dt"])
    taskgraph.merge_refinement(graph, ref)
    taskgraph.serialize(graph, out_path or model_path)
    click.echo(f"merged {len(ref.entries)} refinement rows")


@main.command(name="teach-recovery")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--skill", "skill_id", required=True, type=int)
@click.option("--label", required=True, type=int)
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def teach_recovery_cmd(model_path, skill_id, label, corpus_path, out_path):
    """Segment a recovery corpus and append it as a branch."""
    graph = taskgraph.deserialize(model_path)
    oset = load_corpus(corpus_path)
    try:
        teach_recovery(graph, skill_id, label, oset)
    except taskgraph.GraphError as e:
        _fail(str(e))
    taskgraph.serialize(graph, out_path or model_path)
    session = model_path + ".session.json"
    import os
    if os.path.exists(session):
        os.unlink(session)
    click.echo(f"appended recovery branch for skill {skill_id}, label {label}")


@main.command(name="eval-seg")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--name", default="result")
def eval_seg(pred_path, gt_path, out_path, name):
    """Segmentation report (frame accuracy, edit score, F1 at overlaps)."""
    with open(pred_path) as fh:
        doc = json.load(fh)
    pred = {int(k): np.asarray(v, int)
            for k, v in (doc["labels"] if "labels" in doc else doc).items()}
    gt = load_labels(gt_path)
    rep = seg_report(pred, gt)
    click.echo(rep.table(name))
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(rep.to_dict(), fh)
            fh.write("\n")


@main.command(name="eval-anom")
@click.option("--log", "log_paths", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--scenario", "scenario_paths", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--dt", default=0.01, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--name", default="result")
def eval_anom(log_paths, scenario_paths, dt, out_path, name):
    """Anomaly-detection report over paired episode logs and scenarios."""
    if len(log_paths) != len(scenario_paths):
        _fail("--log and --scenario must be paired")
    episodes = []
    for lp, sp in zip(log_paths, scenario_paths):
        log = EpisodeLog.load(lp)
        sc = Scenario.load(sp)
        onset = sc.anomalies[0].onset if sc.anomalies else None
        episodes.append((log, onset))
    rep = anom_report(episodes, dt)
    click.echo(rep.table(name))
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(rep.to_dict(), fh)
            fh.write("\n")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--port", default=8321, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(model_path, port, host):
    """Serve the teaching/execution session over HTTP + WebSocket."""
    import uvicorn

    from .service import Session, create_app

    session = Session(model_path=model_path)
    app = create_app(session)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
