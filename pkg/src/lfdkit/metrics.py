"""Segmentation and anomaly-detection evaluation metrics.

Segmentation: frame accuracy under an optimal injective label assignment,
edit score over segment-label sequences, and segment F1 at IoU thresholds.
Anomaly detection: frame-wise confusion over confident cycles, detection
delay, and episode-level verdict accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class SegReport:
    acc: float
    edit: float
    f1: dict            # {10: .., 25: .., 50: ..}
    avg: float
    mapping: dict       # predicted label -> gt label or None

    def to_dict(self) -> dict:
        return {"acc": self.acc, "edit": self.edit,
                "f1": {str(k): v for k, v in self.f1.items()}, "avg": self.avg,
                "mapping": {str(k): v for k, v in self.mapping.items()}}

    def table(self, name: str = "result") -> str:
        head = f"{'Method':<12}{'Acc':>8}{'Edit':>8}{'F1@10':>8}{'F1@25':>8}{'F1@50':>8}{'Avg':>8}"
        row = (f"{name:<12}{self.acc:>8.1f}{self.edit:>8.1f}"
               f"{self.f1[10]:>8.1f}{self.f1[25]:>8.1f}{self.f1[50]:>8.1f}{self.avg:>8.1f}")
        return head + "\n" + row


@dataclass(frozen=True)
class AnomReport:
    acc: float
    precision: float
    recall: float
    f1: float
    mean_delay: float    # seconds
    episode_acc: float
    n_episodes: int
    n_excluded: int

    def to_dict(self) -> dict:
        return {"acc": self.acc, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "mean_delay": self.mean_delay,
                "episode_acc": self.episode_acc, "n_episodes": self.n_episodes,
                "n_excluded": self.n_excluded}

    def table(self, name: str = "result") -> str:
        head = f"{'Method':<12}{'Acc':>8}{'Pre':>8}{'Rec':>8}{'F1':>8}{'Del':>8}{'EpAcc':>8}"
        row = (f"{name:<12}{self.acc:>8.1f}{self.precision:>8.1f}{self.recall:>8.1f}"
               f"{self.f1:>8.1f}{self.mean_delay:>8.2f}{self.episode_acc:>8.1f}")
        return head + "\n" + row


def _concat(labels: dict) -> tuple:
    keys = sorted(labels)
    return keys, np.concatenate([np.asarray(labels[k], int) for k in keys])


def match_labels(pred: dict, gt: dict) -> dict:
    """Injective predicted-to-ground-truth label assignment maximizing the
    total number of matched frames.  Unmatched predicted labels map to None.
    """
    pk, pall = _concat(pred)
    gk, gall = _concat(gt)
    if len(pall) != len(gall):
        raise ValueError("prediction and ground truth frame counts differ")
    plabs = sorted(set(pall.tolist()))
    glabs = sorted(set(gall.tolist()))
    overlap = np.zeros((len(plabs), len(glabs)))
    for i, pl in enumerate(plabs):
        mask = pall == pl
        for j, gl in enumerate(glabs):
            overlap[i, j] = np.sum(gall[mask] == gl)
    ri, ci = linear_sum_assignment(-overlap)
    mapping = {pl: None for pl in plabs}
    for i, j in zip(ri, ci):
        if overlap[i, j] > 0:
            mapping[plabs[i]] = glabs[j]
    return mapping


def segments_of(labels: np.ndarray) -> list:
    """Contiguous runs as (label, start, end-exclusive)."""
    labels = np.asarray(labels)
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((labels[start], start, i))
            start = i
    return out


def levenshtein(a, b) -> int:
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[lb]


def _map_sequence(labels: np.ndarray, mapping: dict) -> np.ndarray:
    # unmatched predicted labels stay distinct (negative sentinels) so they
    # still count as errors rather than colliding with real labels
    sentinel = {}
    out = np.empty(len(labels), dtype=int)
    for i, v in enumerate(labels):
        m = mapping.get(int(v), int(v))
        if m is None:
            m = sentinel.setdefault(int(v), -1 - len(sentinel))
        out[i] = m
    return out


def seg_report(pred: dict, gt: dict, thresholds=(10, 25, 50)) -> SegReport:
    """Frame accuracy, edit score, and F1@k for a predicted labeling.

    F1@k counts a predicted segment as a true positive when its IoU with a
    not-yet-matched ground-truth segment of the same (mapped) label reaches
    k percent; label agreement is required.
    """
    mapping = match_labels(pred, gt)
    keys = sorted(pred)
    total = matched = 0
    edit_scores = []
    tp = {k: 0 for k in thresholds}
    n_pred_seg = n_gt_seg = 0
    for key in keys:
        p = _map_sequence(np.asarray(pred[key], int), mapping)
        g = np.asarray(gt[key], int)
        total += len(g)
        matched += int(np.sum(p == g))
        pseq = [s[0] for s in segments_of(p)]
        gseq = [s[0] for s in segments_of(g)]
        dist = levenshtein(pseq, gseq)
        edit_scores.append(100.0 * (1.0 - dist / max(len(pseq), len(gseq))))
        psegs = segments_of(p)
        gsegs = segments_of(g)
        n_pred_seg += len(psegs)
        n_gt_seg += len(gsegs)
        for k in thresholds:
            used = [False] * len(gsegs)
            for lab, s0, s1 in psegs:
                best_iou, best_j = 0.0, -1
                for j, (gl, g0, g1) in enumerate(gsegs):
                    if used[j] or gl != lab:
                        continue
                    inter = max(0, min(s1, g1) - max(s0, g0))
                    union = max(s1, g1) - min(s0, g0)
                    iou = inter / union if union else 0.0
                    if iou > best_iou:
                        best_iou, best_j = iou, j
                if best_j >= 0 and best_iou >= k / 100.0:
                    used[best_j] = True
                    tp[k] += 1
    acc = 100.0 * matched / total
    edit = float(np.mean(edit_scores))
    f1 = {}
    for k in thresholds:
        prec = tp[k] / n_pred_seg if n_pred_seg else 0.0
        rec = tp[k] / n_gt_seg if n_gt_seg else 0.0
        f1[k] = 100.0 * 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    avg = float(np.mean([acc, edit] + [f1[k] for k in thresholds]))
    return SegReport(acc=acc, edit=edit, f1=f1, avg=avg, mapping=mapping)


def anom_report(episodes: list, dt: float) -> AnomReport:
    """Aggregate anomaly-detection metrics over monitored episodes.

    episodes: list of (log, onset) where log is an EpisodeLog-like object
    exposing .cycles (records with confident/anomaly flags) and .events, and
    onset is the ground-truth anomaly onset cycle or None for nominal
    episodes.  Entries with onset == "unknown" are excluded but counted.
    """
    tp = fp = tn = fn = 0
    delays = []
    ep_correct = 0
    n_considered = 0
    n_excluded = 0
    for log, onset in episodes:
        if onset == "unknown":
            n_excluded += 1
            continue
        n_considered += 1
        detect_cycle = None
        for ev in log.events:
            if ev.get("type") == "anomaly":
                detect_cycle = ev["cycle"]
                break
        for rec in log.cycles:
            if not rec["flags"]["confident"]:
                continue
            pred_anom = bool(rec["flags"]["anomaly"])
            gt_anom = onset is not None and rec["n"] >= onset
            if pred_anom and gt_anom:
                tp += 1
            elif pred_anom and not gt_anom:
                fp += 1
            elif not pred_anom and gt_anom:
                fn += 1
            else:
                tn += 1
        if onset is None:
            ep_correct += int(detect_cycle is None)
        else:
            ep_correct += int(detect_cycle is not None)
            if detect_cycle is not None:
                delays.append((detect_cycle - onset) * dt)
    total = tp + fp + tn + fn
    acc = 100.0 * (tp + tn) / total if total else 0.0
    prec = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    rec = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return AnomReport(acc=acc, precision=prec, recall=rec, f1=f1,
                      mean_delay=float(np.mean(delays)) if delays else 0.0,
                      episode_acc=100.0 * ep_correct / n_considered if n_considered else 0.0,
                      n_episodes=n_considered, n_excluded=n_excluded)
