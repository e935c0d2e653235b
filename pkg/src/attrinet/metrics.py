"""Evaluation metrics and result tables.

AUROC is computed through tie-aware average ranks, which equals the
Mann-Whitney statistic (probability a random positive outranks a random
negative, ties counted half). AUPRC is average precision with equal scores
collapsed into one threshold group; trapezoidal PR interpolation is
deliberately not used since it overestimates the area. Baseline AUPRC is
the positive prevalence, the AUPRC of a no-skill classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

DEFAULT_THRESHOLD = 0.5


class MetricsError(ValueError):
    pass


@dataclass
class ScoredSet:
    """Parallel score/label arrays for one task on one window pair."""

    scores: np.ndarray
    labels: np.ndarray
    task: str = ""
    window: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise MetricsError(
                f"scores/labels shape mismatch: {self.scores.shape} vs {self.labels.shape}")
        if self.scores.size == 0:
            raise MetricsError("empty scored set")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise MetricsError("labels must be 0 or 1")

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())


def confusion_metrics(s: ScoredSet, threshold: float = DEFAULT_THRESHOLD):
    """(precision, recall, accuracy, no_predicted_positives_flag) at the
    threshold. Precision is reported as 0 (flagged) when nothing is
    predicted positive."""
    if not 0.0 < threshold < 1.0:
        raise MetricsError(f"threshold {threshold} outside (0, 1)")
    pred = s.scores >= threshold
    pos = s.labels == 1
    tp = float(np.sum(pred & pos))
    fp = float(np.sum(pred & ~pos))
    fn = float(np.sum(~pred & pos))
    tn = float(np.sum(~pred & ~pos))
    flagged = (tp + fp) == 0
    precision = 0.0 if flagged else tp / (tp + fp)
    recall = 0.0 if pos.sum() == 0 else tp / (tp + fn)
    accuracy = (tp + tn) / s.n
    return precision, recall, accuracy, flagged


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks; tied scores share the mean of their rank span."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(s: ScoredSet) -> float | None:
    """Mann-Whitney AUROC; None when only one class is present."""
    pos = s.labels == 1
    n_pos = int(pos.sum())
    n_neg = s.n - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(s.scores)
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(s: ScoredSet) -> float:
    """Average precision over descending score groups (ties as one group)."""
    pos = s.labels == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricsError("auprc: no positive labels")
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    ap = 0.0
    tp = 0.0
    seen = 0.0
    i = 0
    while i < s.n:
        j = i
        while j + 1 < s.n and scores[j + 1] == scores[i]:
            j += 1
        group_tp = labels[i : j + 1].sum()
        tp += group_tp
        seen += j - i + 1
        ap += (group_tp / n_pos) * (tp / seen)
        i = j + 1
    return float(ap)


def baseline_auprc(s: ScoredSet) -> float:
    """Positive prevalence: the exact AUPRC of a random classifier."""
    return s.prevalence


@dataclass
class MetricsReport:
    """One evaluation row: a task at one observation/prediction pair."""

    task: str
    obs_months: float
    pred_months: float
    precision: float
    recall: float
    accuracy: float
    auroc: float | None
    auprc: float
    baseline_auprc: float
    n: int
    prevalence: float
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(s: ScoredSet, obs_months: float, pred_months: float,
                    threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    precision, recall, accuracy, flagged = confusion_metrics(s, threshold)
    flags = []
    if flagged:
        flags.append("no_predicted_positives")
    area = auroc(s)
    if area is None:
        flags.append("single_class")
    return MetricsReport(
        task=s.task,
        obs_months=obs_months,
        pred_months=pred_months,
        precision=precision,
        recall=recall,
        accuracy=accuracy,
        auroc=area,
        auprc=auprc(s) if s.labels.max() == 1 else float("nan"),
        baseline_auprc=baseline_auprc(s),
        n=s.n,
        prevalence=s.prevalence,
        flags=flags,
    )


def round_half_away(x: float, digits: int = 2) -> str:
    """0.755 renders as 0.76: half values round away from zero."""
    scaled = x * 10**digits
    rounded = np.floor(scaled + 0.5) if x >= 0 else np.ceil(scaled - 0.5)
    return f"{rounded / 10**digits:.{digits}f}"


TABLE_COLUMNS = ("Observation", "Prediction", "Precision", "Recall",
                 "AUROC", "AUPRC", "B.AUPRC")


def results_table(reports, sep: str = ",") -> str:
    """One delimiter-separated table per call, rows in input order,
    2-decimal values."""
    reports = list(reports)
    if not reports:
        raise MetricsError("results_table: no report rows")
    lines = [sep.join(TABLE_COLUMNS)]
    for r in reports:
        cells = [
            f"{r.obs_months:g}",
            f"{r.pred_months:g}",
            round_half_away(r.precision),
            round_half_away(r.recall),
            round_half_away(r.auroc) if r.auroc is not None else "NA",
            round_half_away(r.auprc),
            round_half_away(r.baseline_auprc),
        ]
        lines.append(sep.join(cells))
    return "\n".join(lines) + "\n"


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
