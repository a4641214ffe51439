"""Top-1 evaluation and label-distribution distances."""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from ._validation import DimensionError, ValidationError, check_labels


@dataclass(frozen=True)
class EvalReport:
    top1: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray


def top1_accuracy(model, X, y, n_classes=None):
    """Evaluate ``model.decision_function`` by arg-max (ties to the lowest class).

    Classes absent from ``y`` get a per-class accuracy of NaN.
    """
    logits = np.asarray(model.decision_function(X))
    if n_classes is None:
        n_classes = logits.shape[1]
    if logits.ndim != 2 or logits.shape[1] != n_classes:
        raise DimensionError(f"model emits {logits.shape[-1]} logits, expected {n_classes}")
    y = check_labels(y, n_classes)
    pred = np.argmax(logits, axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / support, np.nan)
    total = confusion.sum()
    top1 = float(np.trace(confusion) / total) if total else 0.0
    return EvalReport(top1, per_class, confusion)


def _normalise(h, name):
    h = np.asarray(h, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        raise ValidationError(f"{name} has zero total count")
    return h / total


def tv_distance(p, q):
    """Total-variation distance between two (unnormalised) histograms."""
    p = _normalise(p, "p")
    q = _normalise(q, "q")
    if p.shape != q.shape:
        raise DimensionError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.sum(np.abs(p - q)))


def mean_pairwise_tv(histograms):
    pairs = list(combinations(range(len(histograms)), 2))
    if not pairs:
        return 0.0
    return float(np.mean([tv_distance(histograms[i], histograms[j]) for i, j in pairs]))
