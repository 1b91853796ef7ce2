"""Segment-level metrics, reference predictors and the onset-aligned timeline."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import ValidationError
from .ingestion import OnsetAnnotation

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "auroc", "auprc", "f1", "precision", "recall")


@dataclass(frozen=True)
class ScoredSegment:
    video_id: str
    start_s: float
    score: float
    label: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0 or math.isnan(self.score):
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.label not in (0, 1, None):
            raise ValidationError(f"label must be 0, 1 or None, got {self.label}")


@dataclass
class MetricsReport:
    accuracy: float
    auroc: float | None
    auprc: float | None
    f1: float
    precision: float
    recall: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Tied pairs count one half. Computed from average ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Sums precision times the recall increment over every distinct score
    threshold, taken from highest to lowest; tied scores enter together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("AUPRC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # Last index of each run of equal scores.
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    precision = tp / predicted
    recall = tp / n_pos
    recall_step = np.diff(np.r_[0.0, recall])
    return float(np.sum(recall_step * precision))


def _safe_div(a, b):
    return a / b if b > 0 else 0.0


def compute_metrics(scored: Sequence[ScoredSegment] | None = None, threshold: float = 0.5, *,
                    scores=None, labels=None) -> MetricsReport:
    """All reported metrics for a set of scored segments.

    Either pass ``scored`` or the ``scores`` / ``labels`` arrays. A segment
    is predicted ictal when its score is >= ``threshold``. With a single
    class present, AUROC and AUPRC are ``None``.
    """
    if scored is not None:
        if any(s.label is None for s in scored):
            raise ValidationError("metrics need labeled segments")
        scores = np.array([s.score for s in scored], dtype=np.float64)
        labels = np.array([s.label for s in scored], dtype=np.int64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValidationError("scores and labels must be non-empty 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")

    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)

    if pos.all() or not pos.any():
        warnings.warn("only one class present; AUROC and AUPRC are undefined", RuntimeWarning, stacklevel=2)
        roc = prc = None
    else:
        roc = auroc(scores, labels)
        prc = average_precision(scores, labels)
    return MetricsReport(
        accuracy=(tp + tn) / labels.size, auroc=roc, auprc=prc, f1=f1,
        precision=precision, recall=recall, threshold=threshold, tp=tp, fp=fp, tn=tn, fn=fn,
    )


def baseline_rows(n_negative: int = 565, n_positive: int = 387) -> dict[str, MetricsReport]:
    """Reference reports for constant and fair-coin predictors.

    ``all_positive`` and ``all_negative`` are computed by scoring every test
    segment 1.0 or 0.0. ``coin`` holds the expected values of a predictor that
    flips a fair coin per segment; see :func:`simulate_coin` for draws.
    """
    if n_negative <= 0 or n_positive <= 0:
        raise ValidationError("both class counts must be positive")
    labels = np.r_[np.zeros(n_negative, dtype=int), np.ones(n_positive, dtype=int)]
    n = labels.size
    prevalence = n_positive / n
    rows = {
        "all_positive": compute_metrics(scores=np.ones(n), labels=labels),
        "all_negative": compute_metrics(scores=np.zeros(n), labels=labels),
    }
    f1 = 2 * prevalence * 0.5 / (prevalence + 0.5)
    rows["coin"] = MetricsReport(
        accuracy=0.5, auroc=0.5, auprc=prevalence, f1=f1, precision=prevalence, recall=0.5,
        threshold=0.5, tp=n_positive // 2, fp=n_negative // 2,
        tn=n_negative - n_negative // 2, fn=n_positive - n_positive // 2,
    )
    return rows


def simulate_coin(n_negative: int, n_positive: int, rng: np.random.Generator) -> MetricsReport:
    """One run of a fair-coin predictor: uniform scores thresholded at 0.5."""
    labels = np.r_[np.zeros(n_negative, dtype=int), np.ones(n_positive, dtype=int)]
    return compute_metrics(scores=rng.random(labels.size), labels=labels)


def aggregate_reports(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample standard deviation of every metric across runs."""
    if not reports:
        raise ValidationError("nothing to aggregate")
    out = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            out[name] = {"mean": None, "std": None, "values": values}
            continue
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[name] = {"mean": float(arr.mean()), "std": std, "values": [float(v) for v in arr]}
    out["n_runs"] = len(reports)
    return out


@dataclass
class Timeline:
    video_id: str
    offsets_s: list
    scores: list
    aligned: bool
    reference_s: float = 0.0
    labels: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    def plot(self, path, threshold: float = 0.5) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 2.5))
        ax.plot(self.offsets_s, self.scores, lw=1.2, color="tab:blue")
        ax.axhline(threshold, color="grey", lw=0.8, ls=":")
        if self.aligned:
            ax.axvline(0.0, color="tab:red", lw=1.0, ls="--", label="clinical onset")
            ax.legend(loc="upper left", fontsize=8)
        ax.set_xlabel("time relative to clinical onset (s)" if self.aligned else "time (s)")
        ax.set_ylabel("P(ictal)")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(self.video_id, fontsize=9)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def timeline(scored: Sequence[ScoredSegment], annotation: OnsetAnnotation | None,
             window: tuple | None = None) -> Timeline:
    """Per-second predictions indexed by ``start_s - clinical_onset_s``.

    Without an annotation the series stays on absolute time and a warning is
    logged. ``window`` optionally restricts the absolute start times covered.
    """
    items = sorted(scored, key=lambda s: s.start_s)
    if not items:
        raise ValidationError("no scored segments")
    video_ids = {s.video_id for s in items}
    if len(video_ids) != 1:
        raise ValidationError(f"timeline expects one video, got {sorted(video_ids)}")
    video_id = items[0].video_id
    if window is not None:
        lo, hi = window
        if items[0].start_s > lo or items[-1].start_s < hi:
            raise ValidationError(f"scores cover [{items[0].start_s}, {items[-1].start_s}], need [{lo}, {hi}]")
        items = [s for s in items if lo <= s.start_s <= hi]
    if annotation is None:
        logger.warning("no annotation for %s; timeline uses absolute time", video_id)
        ref, aligned = 0.0, False
    else:
        if annotation.video_id != video_id:
            raise ValidationError(f"annotation for {annotation.video_id} given for {video_id}")
        ref, aligned = annotation.clinical_onset_s, True
    return Timeline(
        video_id=video_id,
        offsets_s=[s.start_s - ref for s in items],
        scores=[s.score for s in items],
        aligned=aligned,
        reference_s=ref,
        labels=[s.label for s in items],
    )


def write_scored(path, scored: Sequence[ScoredSegment]) -> None:
    rows = [asdict(s) for s in scored]
    Path(path).write_text(json.dumps(rows, indent=1), encoding="utf-8")


def read_scored(path) -> list[ScoredSegment]:
    """Scored-segment file: a JSON array of ``{video_id, start_s, score, label}``."""
    try:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(rows, list):
        raise ValidationError(f"{path}: expected a JSON array of scored segments")
    out = []
    for i, r in enumerate(rows):
        try:
            out.append(ScoredSegment(str(r["video_id"]), float(r["start_s"]), float(r["score"]), r.get("label")))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: entry {i} is malformed ({exc})") from None
    return out
