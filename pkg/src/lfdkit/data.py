"""Demonstration corpus data model, normalization, and file I/O.

A corpus is a set of demonstrations; each demonstration is a sequence of
time-stamped frames carrying a 2D state, a per-step displacement action,
and a task-defined feature vector.  Corpora are immutable after load and
safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class SchemaError(ValueError):
    """Raised when a corpus or label file does not match the schema."""


class ValidationError(ValueError):
    """Raised when parsed data violates a corpus invariant."""


@dataclass(frozen=True)
class Frame:
    t: float
    s: np.ndarray   # 2D position, meters
    a: np.ndarray   # per-step displacement, meters
    f: np.ndarray   # feature vector


@dataclass(frozen=True)
class Demonstration:
    id: int
    frames: tuple
    dt: float

    def __len__(self) -> int:
        return len(self.frames)

    def states(self) -> np.ndarray:
        return np.array([fr.s for fr in self.frames])

    def actions(self) -> np.ndarray:
        return np.array([fr.a for fr in self.frames])

    def features(self) -> np.ndarray:
        return np.array([fr.f for fr in self.frames])

    def times(self) -> np.ndarray:
        return np.array([fr.t for fr in self.frames])


@dataclass(frozen=True)
class NormParams:
    """Per-feature mean/min/max used for mean normalization.

    Constant dimensions (max == min) are flagged and left untransformed so
    downstream covariance regularization can handle them.
    """

    mean: np.ndarray
    fmin: np.ndarray
    fmax: np.ndarray
    constant: np.ndarray  # bool mask

    def apply(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=float).copy()
        span = self.fmax - self.fmin
        live = ~self.constant
        x[..., live] = (x[..., live] - self.mean[live]) / span[live]
        return x

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "min": self.fmin.tolist(),
            "max": self.fmax.tolist(),
            "constant": self.constant.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormParams":
        return cls(
            mean=np.asarray(d["mean"], dtype=float),
            fmin=np.asarray(d["min"], dtype=float),
            fmax=np.asarray(d["max"], dtype=float),
            constant=np.asarray(d["constant"], dtype=bool),
        )


@dataclass(frozen=True)
class ObservationSet:
    demos: tuple
    dt: float
    feature_names: tuple
    workspace: tuple  # ((xmin, ymin), (xmax, ymax))
    norm: NormParams | None = None

    @property
    def n_frames(self) -> int:
        return sum(len(d) for d in self.demos)

    @property
    def feature_dim(self) -> int:
        return len(self.feature_names)

    def pooled_features(self) -> np.ndarray:
        return np.concatenate([d.features() for d in self.demos], axis=0)


@dataclass(frozen=True)
class RefinementSet:
    """Corrective rows already assigned to skills: (skill label, frame) pairs."""

    entries: tuple  # of (int, Frame)

    def by_skill(self) -> dict:
        out: dict = {}
        for label, fr in self.entries:
            out.setdefault(int(label), []).append(fr)
        return out


def _require(cond: bool, msg: str, err=SchemaError) -> None:
    if not cond:
        raise err(msg)


def make_demonstration(demo_id: int, t, s, a, f, dt: float) -> Demonstration:
    """Build a validated Demonstration from arrays; a may be None (recomputed)."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    f = np.asarray(f, dtype=float)
    n = len(t)
    if n < 2:
        raise ValidationError(f"demo {demo_id}: N_d >= 2 violated (got {n} frames)")
    if s.shape != (n, 2):
        raise ValidationError(f"demo {demo_id}: state must be (N, 2), got {s.shape}")
    if not (np.diff(t) > 0).all():
        bad = int(np.argmin(np.diff(t)))
        raise ValidationError(f"demo {demo_id}: timestamps not strictly increasing at frame {bad + 1}")
    if a is None:
        a = np.vstack([np.diff(s, axis=0), np.zeros((1, 2))])
    else:
        a = np.asarray(a, dtype=float)
        if a.shape != s.shape:
            raise ValidationError(f"demo {demo_id}: action shape {a.shape} != state shape {s.shape}")
        if not np.allclose(a[:-1], np.diff(s, axis=0), atol=1e-9):
            bad = int(np.argmax(np.abs(a[:-1] - np.diff(s, axis=0)).sum(axis=1)))
            raise ValidationError(f"demo {demo_id}: action[{bad}] != s[{bad + 1}] - s[{bad}]")
    for name, arr in (("t", t), ("s", s), ("a", a), ("f", f)):
        if not np.isfinite(arr).all():
            raise ValidationError(f"demo {demo_id}: non-finite value in field '{name}'")
    frames = tuple(Frame(float(t[i]), s[i].copy(), a[i].copy(), f[i].copy()) for i in range(n))
    return Demonstration(id=int(demo_id), frames=frames, dt=float(dt))


def load_corpus(path: str) -> ObservationSet:
    """Load and validate a demonstration corpus file.

    Missing per-frame actions are recomputed as state differences (last
    action zero).  Schema problems name the offending field; invariant
    violations name the demo and frame.
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    _require(isinstance(doc, dict), "corpus root must be an object")
    _require("header" in doc, "missing field 'header'")
    _require("demos" in doc, "missing field 'demos'")
    header = doc["header"]
    for key in ("dt", "feature_names", "workspace"):
        _require(key in header, f"missing field 'header.{key}'")
    ws = header["workspace"]
    for key in ("min", "max"):
        _require(key in ws and len(ws[key]) == 2, f"missing or malformed field 'header.workspace.{key}'")
    dt = float(header["dt"])
    names = tuple(header["feature_names"])
    fdim = len(names)
    demos = []
    for di, dd in enumerate(doc["demos"]):
        _require("id" in dd, f"missing field 'demos[{di}].id'")
        _require("frames" in dd, f"missing field 'demos[{di}].frames'")
        t, s, a, f = [], [], [], []
        has_a = True
        for fi, fr in enumerate(dd["frames"]):
            for key in ("t", "s", "f"):
                _require(key in fr, f"missing field 'demos[{di}].frames[{fi}].{key}'")
            _require(len(fr["f"]) == fdim,
                     f"demos[{di}].frames[{fi}].f has {len(fr['f'])} entries, header declares {fdim}")
            t.append(fr["t"])
            s.append(fr["s"])
            f.append(fr["f"])
            if "a" in fr:
                a.append(fr["a"])
            else:
                has_a = False
        demos.append(make_demonstration(dd["id"], t, s, a if has_a else None, f, dt))
    norm = NormParams.from_dict(doc["norm"]) if doc.get("norm") else None
    return ObservationSet(
        demos=tuple(demos),
        dt=dt,
        feature_names=names,
        workspace=(tuple(float(v) for v in ws["min"]), tuple(float(v) for v in ws["max"])),
        norm=norm,
    )


def save_corpus(oset: ObservationSet, path: str) -> None:
    doc = {
        "header": {
            "dt": oset.dt,
            "feature_names": list(oset.feature_names),
            "workspace": {"min": list(oset.workspace[0]), "max": list(oset.workspace[1])},
        },
        "demos": [
            {
                "id": d.id,
                "frames": [
                    {"t": fr.t, "s": fr.s.tolist(), "a": fr.a.tolist(), "f": fr.f.tolist()}
                    for fr in d.frames
                ],
            }
            for d in oset.demos
        ],
    }
    if oset.norm is not None:
        doc["norm"] = oset.norm.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_labels(path: str) -> dict:
    """Load a ground-truth label file: {demo_id: [label per frame]}."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    _require(isinstance(doc, dict), "label file root must be an object")
    return {int(k): np.asarray(v, dtype=int) for k, v in doc.items()}


def save_labels(labels: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump({str(k): np.asarray(v).astype(int).tolist() for k, v in labels.items()}, fh)
        fh.write("\n")


def normalize_features(oset: ObservationSet) -> tuple:
    """Mean-normalize every feature dimension over the pooled corpus.

    Each live dimension is transformed as (f - mean) / (max - min); constant
    dimensions are flagged in the returned NormParams and left untouched.
    Returns (normalized ObservationSet, NormParams).
    """
    pooled = oset.pooled_features()
    if pooled.shape[0] == 0:
        raise ValidationError("cannot normalize an empty corpus")
    mean = pooled.mean(axis=0)
    fmin = pooled.min(axis=0)
    fmax = pooled.max(axis=0)
    constant = fmax == fmin
    params = NormParams(mean=mean, fmin=fmin, fmax=fmax, constant=constant)
    demos = []
    for d in oset.demos:
        fn = params.apply(d.features())
        frames = tuple(
            Frame(fr.t, fr.s, fr.a, fn[i].copy()) for i, fr in enumerate(d.frames)
        )
        demos.append(Demonstration(id=d.id, frames=frames, dt=d.dt))
    out = ObservationSet(
        demos=tuple(demos),
        dt=oset.dt,
        feature_names=oset.feature_names,
        workspace=oset.workspace,
        norm=params,
    )
    return out, params
