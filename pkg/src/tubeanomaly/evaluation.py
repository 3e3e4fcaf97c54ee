"""ROC/AUC, test-time tube sources, the localization-error sweep and score aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .training import FlowCache, Model, TrainingSample, random_tube
from .tubes import Tube, full_frame_tube, scale_tube, translate_tube

__all__ = [
    "RocCurve",
    "EvalReport",
    "TubeSource",
    "ROBUSTNESS_SETTINGS",
    "TRANSLATE_REFERENCE",
    "AGGREGATIONS",
    "roc_auc",
    "pair_auc",
    "evaluate",
    "evaluate_scores",
    "robustness_suite",
    "aggregate_scores",
    "aggregation_sweep",
    "reports_to_csv",
    "roc_to_csv",
    "read_roc_csv",
]


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass(frozen=True)
class EvalReport:
    setting: str
    auc: float
    n_pos: int
    n_neg: int
    roc: RocCurve | None = None
    scores: np.ndarray | None = None


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("ROC needs both positive and negative samples")
    return scores, labels


def roc_auc(scores, labels) -> RocCurve:
    """ROC over all distinct thresholds with trapezoidal area.

    Tied scores move the curve diagonally, which counts a tied
    positive/negative pair as half a correct ordering.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, auc)


def pair_auc(scores, labels) -> float:
    """Fraction of positive/negative pairs ordered correctly, ties counted 0.5."""
    scores, labels = _check_binary(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


# --------------------------------------------------------------------------
# tube sources


# translations are given in pixels of a frame this size and rescaled to the
# actual frame, so a shift covers the same fraction of the view at any size
TRANSLATE_REFERENCE = 224


@dataclass(frozen=True)
class TubeSource:
    """How a test sample's tube is chosen.

    ``kind`` is ``oracle`` (annotated tube), ``fullframe``, ``scale`` or
    ``translate``. Normal samples (no annotation) get a seeded random tube
    except under ``fullframe``, or under every kind when
    ``normals_fullframe`` is set. ``translate`` values are pixels at
    ``TRANSLATE_REFERENCE`` resolution.
    """

    kind: str = "oracle"
    value: float = 1.0
    normals_fullframe: bool = False

    @property
    def name(self) -> str:
        if self.kind in ("oracle", "fullframe"):
            base = self.kind
        elif self.kind == "scale":
            base = f"scale:{self.value:.2f}"
        elif self.kind == "translate":
            base = f"translate:{self.value:g}px"
        else:
            raise ValueError(f"unknown tube source {self.kind!r}")
        return base + ("+ffneg" if self.normals_fullframe and self.kind != "fullframe" else "")

    def tube_for(self, sample: TrainingSample, rng: np.random.Generator) -> Tube:
        dims = sample.clip.dims
        if self.kind == "fullframe":
            return full_frame_tube(dims)
        if sample.tube is None:
            return full_frame_tube(dims) if self.normals_fullframe else random_tube(dims, rng)
        if self.kind == "oracle":
            return sample.tube
        if self.kind == "scale":
            return scale_tube(sample.tube, self.value, dims)
        if self.kind == "translate":
            shift = self.value * min(dims) / TRANSLATE_REFERENCE
            return translate_tube(sample.tube, shift, shift, dims)
        raise ValueError(f"unknown tube source {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "TubeSource":
        """``oracle``, ``fullframe``, ``scale:1.5`` or ``translate:20``."""
        kind, _, val = text.partition(":")
        if kind in ("oracle", "fullframe") and not val:
            return cls(kind)
        if kind in ("scale", "translate") and val:
            return cls(kind, float(val.rstrip("px")))
        raise ValueError(f"cannot parse tube source {text!r}")


ROBUSTNESS_SETTINGS = (
    TubeSource("oracle"),
    TubeSource("scale", 0.50),
    TubeSource("scale", 0.75),
    TubeSource("scale", 1.00),
    TubeSource("scale", 1.50),
    TubeSource("scale", 2.00),
    TubeSource("scale", 4.00),
    TubeSource("fullframe"),
    TubeSource("translate", 20.0),
    TubeSource("translate", 40.0),
)


def evaluate_scores(scores, labels, setting: str) -> EvalReport:
    labels = np.asarray(labels)
    roc = roc_auc(scores, labels)
    return EvalReport(setting, roc.auc, int(labels.sum()), int((1 - labels).sum()), roc, np.asarray(scores))


def evaluate(
    model: Model,
    testset: Sequence[TrainingSample],
    tube_source: TubeSource | str = "oracle",
    seed: int = 0,
    flow_cache: FlowCache | None = None,
    scorer: Callable | None = None,
) -> EvalReport:
    """AUC of ``model`` over ``testset`` with tubes from ``tube_source``.

    ``scorer(sample, tube)`` replaces the model when given; it is how stub
    models are plugged in.
    """
    if not testset:
        raise ValueError("empty test set")
    source = TubeSource.parse(tube_source) if isinstance(tube_source, str) else tube_source
    rng = np.random.default_rng(seed)
    flow_cache = flow_cache or FlowCache(model.flow_params if model is not None else None)
    tubes = [source.tube_for(s, rng) for s in testset]
    if scorer is not None:
        scores = np.array([scorer(s, t) for s, t in zip(testset, tubes)], dtype=np.float64)
    else:
        scores = _score_pairs(model, testset, tubes, flow_cache)
    return evaluate_scores(scores, [s.label for s in testset], source.name)


def _score_pairs(model, samples, tubes, flow_cache, chunk: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(samples), chunk):
        pairs = [model.prepare(s.clip, t, flow_cache(s.clip)) for s, t in zip(samples[i : i + chunk], tubes[i : i + chunk])]
        out.append(model.score_batch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), chunk))
    return np.concatenate(out)


def robustness_suite(
    model: Model,
    testset: Sequence[TrainingSample],
    seed: int = 0,
    flow_cache: FlowCache | None = None,
    settings: Sequence[TubeSource] = ROBUSTNESS_SETTINGS,
) -> list:
    """One report per localization-error setting, oracle first.

    Every setting reuses the same seeded random tubes for normal samples, so
    only the annotated tubes differ between rows.
    """
    flow_cache = flow_cache or FlowCache(model.flow_params)
    return [evaluate(model, testset, s, seed=seed, flow_cache=flow_cache) for s in settings]


# --------------------------------------------------------------------------
# aggregation


AGGREGATIONS = (("max", None), ("topk_avg", 10), ("topk_avg", 20), ("topk_avg", 30), ("topk_avg", 45))


def aggregate_scores(scores, method: str = "max", k: int | None = None) -> float:
    """``max`` or the mean of the ``min(k, N)`` largest scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no scores to aggregate")
    if method == "max":
        return float(s.max())
    if method == "topk_avg":
        if k is None or k < 1:
            raise ValueError(f"top-k average needs k >= 1, got {k}")
        top = np.sort(s)[::-1][: min(k, s.size)]
        return float(top.mean())
    raise ValueError(f"unknown aggregation {method!r}")


def _aggregation_name(method: str, k: int | None) -> str:
    return "max" if method == "max" else f"top{k}_avg"


def aggregation_sweep(tube_scores: Sequence, labels, methods=AGGREGATIONS) -> list:
    """AUC per aggregation over per-clip lists of tube scores."""
    labels = np.asarray(labels)
    reports = []
    for method, k in methods:
        agg = [aggregate_scores(s, method, k) for s in tube_scores]
        reports.append(evaluate_scores(agg, labels, _aggregation_name(method, k)))
    return reports


# --------------------------------------------------------------------------
# CSV


def reports_to_csv(reports: Sequence[EvalReport], seed: int | None = None) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed} format_version=1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "auc", "n_pos", "n_neg"])
    for r in reports:
        w.writerow([r.setting, repr(float(r.auc)), r.n_pos, r.n_neg])
    return buf.getvalue()


def roc_to_csv(roc: RocCurve, seed: int | None = None) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed} format_version=1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr"])
    for f, t in roc.points:
        w.writerow([repr(f), repr(t)])
    return buf.getvalue()


def read_roc_csv(text: str) -> RocCurve:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or [c.strip() for c in rows[0]] != ["fpr", "tpr"]:
        raise ValueError("ROC CSV must start with the header 'fpr,tpr'")
    try:
        pts = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"malformed ROC row: {exc}") from None
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("ROC CSV needs at least two points")
    if np.any(pts < 0) or np.any(pts > 1) or np.any(np.diff(pts, axis=0) < 0):
        raise ValueError("ROC points must be monotone within [0, 1]")
    auc = float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))
    return RocCurve(pts[:, 0], pts[:, 1], auc)
