"""Pseudo-label generation with an adaptive (mean-confidence) threshold."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .backbone import softmax
from .weak_labels import WeakLabelSet


@dataclass(frozen=True)
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    generation: int
    threshold_used: float

    def __len__(self):
        return len(self.indices)

    def pairs(self) -> set:
        return set(zip(self.indices.tolist(), self.labels.tolist()))

    @classmethod
    def empty(cls, generation: int = 0) -> "PseudoLabelSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), generation, math.inf)


def harden_predictions(probs):
    """Argmax label (smallest class on ties) and its probability per row."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("expected a non-empty N x C probability matrix")
    labels = np.argmax(probs, axis=1).astype(np.int64)
    return labels, probs[np.arange(len(probs)), labels]


def adaptive_threshold(confidences) -> float:
    """Mean confidence, summed exactly and kept inside [min, max]."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("cannot threshold an empty confidence list")
    mean = math.fsum(conf.tolist()) / conf.size
    return float(min(max(mean, conf.min()), conf.max()))


def select_pseudo_labels(hardened, confidences, threshold: float,
                         weak: WeakLabelSet | None, generation: int) -> PseudoLabelSet:
    """Keep points with confidence strictly above ``threshold`` that carry no weak label."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    hardened = np.asarray(hardened, dtype=np.int64)
    conf = np.asarray(confidences, dtype=np.float64)
    keep = conf > threshold
    if weak is not None and len(weak):
        keep[weak.indices] = False
    idx = np.flatnonzero(keep)
    return PseudoLabelSet(idx, hardened[idx], conf[idx], generation, float(threshold))


def regenerate(backbone, params, features, weak: WeakLabelSet, generation: int,
               scope: str = "all", fixed_threshold: float | None = None) -> PseudoLabelSet:
    """Fresh pseudo-label set from the current model; replaces any earlier set.

    ``scope`` chooses which predictions the mean runs over: ``"all"``
    training points or only the ``"unlabeled"`` ones. ``fixed_threshold``
    bypasses the adaptive rule (ablation only).
    """
    probs = softmax(backbone.forward(features, params))
    hard, conf = harden_predictions(probs)
    if fixed_threshold is not None:
        thr = float(fixed_threshold)
    elif scope == "all":
        thr = adaptive_threshold(conf)
    elif scope == "unlabeled":
        pool = np.ones(len(conf), dtype=bool)
        pool[weak.indices] = False
        thr = adaptive_threshold(conf[pool] if pool.any() else conf)
    else:
        raise ValueError(f"unknown threshold scope {scope!r}")
    return select_pseudo_labels(hard, conf, thr, weak, generation + 1)


def write_pseudo_snapshot(path, pseudo: PseudoLabelSet, append: bool = False):
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["generation", "point_index", "class_id", "confidence"])
        for i, c, p in zip(pseudo.indices, pseudo.labels, pseudo.confidences):
            writer.writerow([pseudo.generation, int(i), int(c), repr(float(p))])
