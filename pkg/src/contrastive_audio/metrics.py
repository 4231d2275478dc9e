"""Confusion matrices, per-class precision/recall/F1, macro-F1 and weighted
average precision (per-class precision weighted by true-instance count).

Convention: rows are true labels, columns are predictions. Any ratio whose
denominator is zero is reported as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import EmptyMatrix, LengthMismatch, OutOfRangeLabel

__all__ = [
    "MetricsReport",
    "confusion_matrix",
    "precision_recall_f1",
    "weighted_avg_precision",
    "normalize_confusion",
    "report",
    "write_confusion_csv",
]


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def confusion_matrix(preds, labels, n_classes):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.size != labels.size:
        raise LengthMismatch(f"{preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise OutOfRangeLabel(f"{name} outside [0, {n_classes}): "
                                  f"min {arr.min()}, max {arr.max()}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def precision_recall_f1(cm):
    """Per-class ``(precision, recall, f1, support)`` arrays."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1, cm.sum(axis=1)


def weighted_avg_precision(cm):
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    if support.sum() == 0:
        raise EmptyMatrix("weighted average precision is undefined for an empty confusion matrix")
    precision, _, _, _ = precision_recall_f1(cm)
    return float(np.dot(support, precision) / support.sum())


def normalize_confusion(cm):
    """Divide each row by its sum; all-zero rows stay zero."""
    cm = np.asarray(cm, dtype=np.float64)
    return _safe_div(cm, cm.sum(axis=1, keepdims=True))


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    weighted_f1: float
    wap: float
    n_eval: int

    def to_dict(self):
        return {
            "per_class": [
                {"class": k, "precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
                for k, (p, r, f, s) in enumerate(zip(self.precision, self.recall, self.f1, self.support))
            ],
            "macro_f1": float(self.macro_f1),
            "weighted_f1": float(self.weighted_f1),
            "wap": float(self.wap),
            "n_eval": int(self.n_eval),
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def report(cm):
    precision, recall, f1, support = precision_recall_f1(cm)
    total = int(support.sum())
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        macro_f1=float(f1.mean()) if f1.size else 0.0,
        weighted_f1=float(np.dot(support, f1) / total) if total else 0.0,
        wap=weighted_avg_precision(cm) if total else 0.0,
        n_eval=total,
    )


def write_confusion_csv(path, matrix):
    matrix = np.asarray(matrix)
    n = matrix.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [str(k) for k in range(n)])
        for k, row in enumerate(matrix):
            cells = [str(int(v)) for v in row] if matrix.dtype.kind in "iu" else [repr(float(v)) for v in row]
            writer.writerow([str(k)] + cells)
