"""Binary classification metrics and mean±std aggregation over repeated runs.

Class 1 (the HGG analog) is the positive class throughout. Metrics that are
undefined for a given confusion matrix are reported as ``None`` rather than 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError, UndefinedMetricError, ValidationError

METRIC_NAMES = ("auc", "prc", "accuracy", "precision", "sensitivity")
METRIC_TITLES = {"auc": "AUC", "prc": "PRC", "accuracy": "Accuracy", "precision": "Precision", "sensitivity": "Sensitivity"}
UNDEFINED = "undefined"


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    return scores, labels.astype(int)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC, P(pos > neg) + 0.5 P(tie), from midranks of the sorted scores."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # midrank for every run of tied scores
    bounds = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(scores)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds (descending) of precision times
    the recall gained there. Tied scores enter together as one threshold."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR AUC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_gain))


@dataclass(frozen=True)
class Confusion:
    accuracy: float
    precision: float | None
    sensitivity: float | None


def confusion_metrics(scores, labels, threshold: float = 0.5) -> Confusion:
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    n = tp + fp + fn + tn
    return Confusion(
        accuracy=(tp + tn) / n if n else None,
        precision=tp / (tp + fp) if tp + fp else None,
        sensitivity=tp / (tp + fn) if tp + fn else None,
    )


@dataclass
class RunReport:
    auc: float | None
    prc: float | None
    accuracy: float | None
    precision: float | None
    sensitivity: float | None
    seed: int = 0
    config_digest: str = ""
    label: str = ""

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} lies outside [0, 1]")

    def metrics(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def csv_header(self) -> list[str]:
        return ["label", "seed", "config_digest", *METRIC_NAMES]

    def csv_row(self) -> list[str]:
        return [self.label, str(self.seed), self.config_digest, *(_fmt(v, 6) for v in self.metrics().values())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def evaluate_scores(scores, labels, *, seed: int = 0, config_digest: str = "", label: str = "", threshold: float = 0.5) -> RunReport:
    """All five metrics for one run; AUC-type metrics become ``None`` when undefined."""
    scores, labels = _check(scores, labels)
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = None
    try:
        prc = pr_auc(scores, labels)
    except UndefinedMetricError:
        prc = None
    c = confusion_metrics(scores, labels, threshold)
    return RunReport(auc, prc, c.accuracy, c.precision, c.sensitivity, seed, config_digest, label)


def _fmt(v: float | None, places: int) -> str:
    return UNDEFINED if v is None else f"{v:.{places}f}"


@dataclass
class MetricSummary:
    mean: float | None
    std: float | None

    def render(self) -> str:
        if self.mean is None:
            return UNDEFINED
        return f"{self.mean:.4f}±{self.std:.4f}"


@dataclass
class Aggregate:
    label: str
    n_runs: int
    config_digest: str
    summary: dict[str, MetricSummary] = field(default_factory=dict)

    def __getitem__(self, metric: str) -> MetricSummary:
        return self.summary[metric]


def aggregate(reports: list[RunReport], label: str | None = None) -> Aggregate:
    """Per-metric mean and population standard deviation.

    A metric that is undefined in any run is undefined in the aggregate.
    """
    if len(reports) < 2:
        raise AggregationError(f"aggregation needs at least 2 reports, got {len(reports)}")
    digests = {r.config_digest for r in reports}
    if len(digests) != 1:
        raise AggregationError(f"cannot aggregate runs from different configs: {sorted(digests)}")
    out = Aggregate(label if label is not None else reports[0].label, len(reports), digests.pop())
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            out.summary[name] = MetricSummary(None, None)
            continue
        if min(values) == max(values):
            out.summary[name] = MetricSummary(values[0], 0.0)
            continue
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        out.summary[name] = MetricSummary(mean, math.sqrt(var))
    return out


def aggregates_to_csv(rows: list[Aggregate], leading: dict[str, list[str]] | None = None) -> str:
    """One CSV line per aggregate: optional leading columns, then mean/std per metric."""
    leading = leading or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = list(leading) + ["label", "n_runs"]
    for m in METRIC_NAMES:
        head += [f"{m}_mean", f"{m}_std"]
    w.writerow(head)
    for i, agg in enumerate(rows):
        line = [leading[k][i] for k in leading] + [agg.label, str(agg.n_runs)]
        for m in METRIC_NAMES:
            s = agg[m]
            line += [_fmt(s.mean, 6), _fmt(s.std, 6)]
        w.writerow(line)
    return buf.getvalue()


def aggregates_to_markdown(rows: list[Aggregate], leading: dict[str, list[str]] | None = None) -> str:
    """Markdown table in the ``mean±std`` layout, one row per aggregate."""
    leading = leading or {"Type": [a.label for a in rows]}
    head = list(leading) + [METRIC_TITLES[m] for m in METRIC_NAMES]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(":---:" for _ in head) + "|"]
    for i, agg in enumerate(rows):
        cells = [leading[k][i] for k in leading] + [agg[m].render() for m in METRIC_NAMES]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
