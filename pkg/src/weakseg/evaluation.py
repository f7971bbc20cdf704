"""Confusion matrix, overall accuracy and per-class / macro F1."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import UNLABELED

CORRECT, INCORRECT, NOT_EVALUATED = 1, 0, -1


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(pred, truth, n_classes: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if np.any(pred < 0):
        raise ValueError("predictions may not contain unlabeled entries")
    keep = truth != UNLABELED
    if np.any(truth[keep] < 0):
        raise ValueError("invalid ground-truth class id")
    if n_classes is None:
        hi = max(pred.max(initial=-1), truth.max(initial=-1))
        n_classes = int(hi) + 1
    if pred.size and (pred.max() >= n_classes or truth.max() >= n_classes):
        raise ValueError("class id out of range")
    flat = truth[keep] * n_classes + pred[keep]
    counts = np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts.astype(np.int64))


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def class_f1(cm: ConfusionMatrix, c: int):
    """``(precision, recall, f1)`` for class ``c``; f1 is None if the class never occurs."""
    if not 0 <= c < cm.n_classes:
        raise ValueError(f"class {c} out of range")
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c, :].sum()) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if tp + fp + fn == 0:
        return precision, recall, None
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def macro_f1(cm: ConfusionMatrix) -> float:
    scores = [f for f in (class_f1(cm, c)[2] for c in range(cm.n_classes)) if f is not None]
    if not scores:
        raise ValueError("no class has a defined F1")
    return sum(scores) / len(scores)


def error_map(pred, truth) -> np.ndarray:
    """1 = correct, 0 = wrong, -1 = no ground truth."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    flags = np.where(pred == truth, CORRECT, INCORRECT)
    flags[truth == UNLABELED] = NOT_EVALUATED
    return flags.astype(np.int64)


def metrics_report(cm: ConfusionMatrix, class_names=None) -> dict:
    names = list(class_names) if class_names else [str(c) for c in range(cm.n_classes)]
    per_class = {}
    for c in range(cm.n_classes):
        p, r, f = class_f1(cm, c)
        per_class[names[c]] = {"precision": p, "recall": r, "f1": f,
                               "support": int(cm.counts[c].sum())}
    return {
        "overall_accuracy": overall_accuracy(cm),
        "macro_f1": macro_f1(cm),
        "per_class": per_class,
        "confusion_matrix": cm.counts.tolist(),
        "class_names": names,
    }


def write_report_json(path, report: dict):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_report_csv(path, report: dict):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for name, row in report["per_class"].items():
            f1 = "" if row["f1"] is None else repr(row["f1"])
            writer.writerow([name, repr(row["precision"]), repr(row["recall"]), f1,
                             row["support"]])
        writer.writerow(["macro_f1", "", "", repr(report["macro_f1"]), ""])
        writer.writerow(["overall_accuracy", "", "", repr(report["overall_accuracy"]), ""])
