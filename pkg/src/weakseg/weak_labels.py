"""Sparse ground-truth annotation sampling.

Each class gets one seeded permutation of its points that depends only on
``(seed, class)``. A setting with ``m`` labels per class takes a prefix of
that permutation, so every smaller setting is contained in every larger one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import UNLABELED

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeakLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    per_class_requested: int
    seed: int
    cap_fraction: float = 0.1
    per_class_selected: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.indices)

    def mask(self, n_points: int) -> np.ndarray:
        m = np.zeros(n_points, dtype=bool)
        m[self.indices] = True
        return m

    def targets(self, n_points: int) -> np.ndarray:
        t = np.full(n_points, UNLABELED, dtype=np.int64)
        t[self.indices] = self.labels
        return t


def class_quota(n_c: int, m: int, cap_fraction: float = 0.1, min_one: bool = True) -> int:
    """Labels drawn from a class with ``n_c`` points for a request of ``m``."""
    if n_c <= 0:
        return 0
    cap = math.floor(cap_fraction * n_c)
    if min_one:
        cap = max(1, cap)
    return min(m, cap)


def class_permutation(class_indices: np.ndarray, seed: int, class_id: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(class_id)])
    return class_indices[rng.permutation(len(class_indices))]


def sample_weak_labels(labels, m: int, cap_fraction: float = 0.1, seed: int = 0,
                       n_classes: int | None = None, min_one: bool = True) -> WeakLabelSet:
    """Draw up to ``m`` labeled points per class, capped at ``cap_fraction`` of the class."""
    if m < 0:
        raise ValueError(f"labels per class must be non-negative, got {m}")
    labels = np.asarray(labels, dtype=np.int64)
    known = labels[labels != UNLABELED]
    if n_classes is None:
        n_classes = int(known.max()) + 1 if known.size else 0
    counts = np.bincount(known, minlength=n_classes)
    missing = [c for c in range(n_classes) if counts[c] == 0]
    if missing:
        logger.warning("classes without any points: %s", missing)

    chosen, chosen_labels, selected = [], [], {}
    for c in range(n_classes):
        quota = class_quota(int(counts[c]), m, cap_fraction, min_one)
        selected[c] = quota
        if quota == 0:
            continue
        perm = class_permutation(np.flatnonzero(labels == c), seed, c)
        chosen.append(perm[:quota])
        chosen_labels.append(np.full(quota, c, dtype=np.int64))

    if chosen:
        idx = np.concatenate(chosen)
        lab = np.concatenate(chosen_labels)
        order = np.argsort(idx, kind="stable")
        idx, lab = idx[order], lab[order]
    else:
        idx = np.zeros(0, dtype=np.int64)
        lab = np.zeros(0, dtype=np.int64)
    return WeakLabelSet(idx, lab, m, seed, cap_fraction, selected)


def write_weak_labels(path, weak: WeakLabelSet):
    lines = [f"# seed={weak.seed} m={weak.per_class_requested} cap={weak.cap_fraction!r}"]
    lines += [f"{i} {c}" for i, c in zip(weak.indices, weak.labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_weak_labels(path) -> WeakLabelSet:
    meta = {"seed": "0", "m": "0", "cap": "0.1"}
    idx, lab = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    key, value = token.split("=", 1)
                    meta[key] = value
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'point_index class_id'")
        try:
            idx.append(int(parts[0]))
            lab.append(int(parts[1]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    idx = np.array(idx, dtype=np.int64)
    lab = np.array(lab, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError(f"{path}: duplicate point indices")
    selected = {int(c): int(n) for c, n in zip(*np.unique(lab, return_counts=True))}
    return WeakLabelSet(idx, lab, int(meta["m"]), int(meta["seed"]),
                        float(meta["cap"]), selected)
