"""Grading metrics: ACA (macro recall), macro F1, one-vs-rest macro AUC."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .core import NUM_GRADES


class MetricWarning(UserWarning):
    """A class was skipped from a macro average."""


@dataclass
class MetricReport:
    aca: float
    macro_f1: float
    auc: float | None
    confusion: list[list[int]]
    per_class_accuracy: list[float | None]

    def to_dict(self) -> dict:
        return {
            "aca": self.aca,
            "macro_f1": self.macro_f1,
            "auc": self.auc,
            "confusion": [list(map(int, row)) for row in self.confusion],
            "per_class_accuracy": list(self.per_class_accuracy),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            aca=data["aca"],
            macro_f1=data["macro_f1"],
            auc=data["auc"],
            confusion=[list(row) for row in data["confusion"]],
            per_class_accuracy=list(data["per_class_accuracy"]),
        )


def confusion_matrix(true, pred, n_classes: int = NUM_GRADES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"length mismatch: {true.size} vs {pred.size}")
    if true.size == 0:
        raise ValueError("empty input")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _present_classes(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1)
    present = rows > 0
    if not present.any():
        raise ValueError("confusion matrix has no samples")
    missing = np.flatnonzero(~present)
    if missing.size:
        warnings.warn(f"classes {missing.tolist()} absent from truth; skipped in macro average", MetricWarning,
                      stacklevel=3)
    return present


def per_class_accuracy(cm) -> list[float | None]:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    return [float(cm[c, c] / rows[c]) if rows[c] > 0 else None for c in range(cm.shape[0])]


def aca(cm) -> float:
    """Mean per-class recall over classes present in the truth."""
    cm = np.asarray(cm)
    present = _present_classes(cm)
    recall = np.diag(cm)[present] / cm.sum(axis=1)[present]
    return float(recall.mean())


def macro_f1(cm) -> float:
    cm = np.asarray(cm)
    present = _present_classes(cm)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    actual = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(f1[present].mean())


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    # Mann-Whitney U from average ranks; ties count one half
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def macro_auc(scores, true) -> float:
    """One-vs-rest AUC per class, macro-averaged over classes with both outcomes."""
    scores = np.asarray(scores, dtype=float)
    true = np.asarray(true, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != true.size:
        raise ValueError(f"scores must be N x C with N={true.size}, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    aucs = []
    skipped = []
    for c in range(scores.shape[1]):
        positive = true == c
        if positive.all() or not positive.any():
            skipped.append(c)
            continue
        aucs.append(_binary_auc(scores[:, c], positive))
    if not aucs:
        raise ValueError("AUC undefined: no class has both positives and negatives")
    if skipped:
        warnings.warn(f"classes {skipped} lack positives or negatives; skipped in AUC", MetricWarning, stacklevel=2)
    return float(np.mean(aucs))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def metric_report(true, logits) -> MetricReport:
    """Score logits against integer labels."""
    logits = np.asarray(logits, dtype=float)
    true = np.asarray(true, dtype=np.int64)
    pred = logits.argmax(axis=1)
    cm = confusion_matrix(true, pred, logits.shape[1])
    try:
        auc = macro_auc(softmax(logits), true)
    except ValueError:
        auc = None
    return MetricReport(
        aca=aca(cm),
        macro_f1=macro_f1(cm),
        auc=auc,
        confusion=cm.tolist(),
        per_class_accuracy=per_class_accuracy(cm),
    )


def is_better(value: float, best: float | None, higher_is_better: bool = True) -> bool:
    if best is None or (isinstance(best, float) and math.isnan(best)):
        return True
    return value > best if higher_is_better else value < best
