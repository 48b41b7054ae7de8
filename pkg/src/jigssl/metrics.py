"""Binary classification metrics, ROC curves and AUROC.

The positive class is label 1 (neoplastic). Ratios with a zero denominator
are reported as ``None`` rather than 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


@dataclass
class EvaluationReport:
    accuracy: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    roc: list[tuple[float, float, float]] | None = field(default=None, repr=False)
    auroc: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "roc"}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")


def _binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x).astype(np.int64).ravel()
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    pred = _binary(predictions, "predictions")
    true = _binary(labels, "labels")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    return ConfusionCounts(
        TP=int(((pred == 1) & (true == 1)).sum()),
        TN=int(((pred == 0) & (true == 0)).sum()),
        FP=int(((pred == 1) & (true == 0)).sum()),
        FN=int(((pred == 0) & (true == 1)).sum()),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def classification_metrics(counts: ConfusionCounts) -> EvaluationReport:
    if counts.total <= 0:
        raise ValueError("no samples in confusion counts")
    tp, tn, fp, fn = counts.TP, counts.TN, counts.FP, counts.FN
    return EvaluationReport(
        accuracy=(tp + tn) / counts.total,
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        precision=_ratio(tp, tp + fp),
    )


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if y.sum() == 0 or y.sum() == y.size:
        raise ValueError("both classes must be present")
    return s, y


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """Threshold sweep over distinct scores, highest first.

    Returns ``(threshold, fpr, tpr)`` triples; a sample counts as positive when
    its score is ``>= threshold``. The first point is ``(inf, 0, 0)``.
    """
    s, y = _check_scores(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    n_pos, n_neg = y.sum(), y.size - y.sum()
    points = [(float("inf"), 0.0, 0.0)]
    points += [(float(s[e]), fp / n_neg, tp / n_pos) for e, tp, fp in zip(ends, tps, fps)]
    return points


def trapezoid_auc(points: Sequence[tuple[float, float, float]]) -> float:
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    s, y = _check_scores(scores, labels)
    ranks = rankdata(s)  # average ranks give ties half credit
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluate_scores(scores, labels, threshold: float = 0.5) -> EvaluationReport:
    """Metrics at a fixed threshold on positive-class probability, plus ROC and AUROC when defined."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    report = classification_metrics(confusion((s >= threshold).astype(int), y))
    if 0 < y.sum() < y.size:
        report.roc = roc_curve(s, y)
        report.auroc = auroc(s, y)
    return report


def write_roc_csv(points: Sequence[tuple[float, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])


def _fmt(v: float | None, digits: int = 2, scale: float = 1.0) -> str:
    return "n/a" if v is None else f"{v * scale:.{digits}f}"


def format_metrics_row(report: EvaluationReport) -> str:
    """Accuracy in percent, the rest as fractions: ``'73.91 / 0.82 / 0.83 / 0.37 / 0.82'``."""
    return " / ".join([
        _fmt(report.accuracy, scale=100.0),
        _fmt(report.f1),
        _fmt(report.sensitivity),
        _fmt(report.specificity),
        _fmt(report.precision),
    ])
