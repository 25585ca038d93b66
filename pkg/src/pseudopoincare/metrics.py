"""Accuracy and ROC-AUC with normal-approximation 95% intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    count: int
    half_width: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.name} value {self.value} outside [0, 1]")
        if self.half_width is not None and self.half_width < 0:
            raise ValueError("interval half-width must be non-negative")

    def as_dict(self) -> dict:
        return {"metric": self.name, "value": self.value, "count": self.count, "ci95": self.half_width}


def interval95(value: float, count: int) -> float:
    return 1.96 * math.sqrt(value * (1.0 - value) / count)


def accuracy(predictions, labels, mask=None) -> MetricReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    mask = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("accuracy over an empty mask")
    value = float(np.mean(predictions[mask] == labels[mask]))
    return MetricReport("accuracy", value, n, interval95(value, n))


def roc_auc(scores, labels) -> MetricReport:
    """Mann-Whitney statistic P(s+ > s-) + P(s+ == s-)/2 via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    value = float(min(max(u / (n_pos * n_neg), 0.0), 1.0))
    return MetricReport("roc_auc", value, int(labels.size), interval95(value, int(labels.size)))
