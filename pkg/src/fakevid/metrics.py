"""Confusion-matrix metrics for binary fake/real predictions.

Zero-denominator precision and recall are defined as 0 rather than NaN so
fold averaging stays total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "support": self.support}


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    real: ClassMetrics
    fake: ClassMetrics

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "real": self.real.to_dict(),
            "fake": self.fake.to_dict(),
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def _class_metrics(predictions, labels, cls: int) -> ClassMetrics:
    tp = sum(1 for p, y in zip(predictions, labels) if p == cls and y == cls)
    fp = sum(1 for p, y in zip(predictions, labels) if p == cls and y != cls)
    fn = sum(1 for p, y in zip(predictions, labels) if p != cls and y == cls)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return ClassMetrics(precision, recall, f1, support=sum(1 for y in labels if y == cls))


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    """Accuracy, macro F1 and per-class precision/recall/F1 from paired predictions."""
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise ValueError("metrics need at least one pair")
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    real = _class_metrics(predictions, labels, 0)
    fake = _class_metrics(predictions, labels, 1)
    return MetricsReport(
        accuracy=correct / len(labels),
        macro_f1=(real.f1 + fake.f1) / 2.0,
        real=real,
        fake=fake,
    )


def mean_metrics(reports: Sequence[MetricsReport]) -> dict:
    """Unweighted mean of metric values across folds; supports are summed."""
    n = len(reports)
    if n == 0:
        raise ValueError("no reports to average")

    def avg(get):
        return sum(get(r) for r in reports) / n

    return {
        "accuracy": avg(lambda r: r.accuracy),
        "macro_f1": avg(lambda r: r.macro_f1),
        "real": {
            "precision": avg(lambda r: r.real.precision),
            "recall": avg(lambda r: r.real.recall),
            "f1": avg(lambda r: r.real.f1),
            "support": sum(r.real.support for r in reports),
        },
        "fake": {
            "precision": avg(lambda r: r.fake.precision),
            "recall": avg(lambda r: r.fake.recall),
            "f1": avg(lambda r: r.fake.f1),
            "support": sum(r.fake.support for r in reports),
        },
    }
