"""Point cloud container, grid subsampling and exact neighbor queries.

Labels are plain integer numpy arrays; ``UNLABELED`` marks points without
a class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

UNLABELED = -1

# Relative slack used when asking the kd-tree for candidate supersets. The
# final membership decision is always made on our own squared distances.
_CANDIDATE_SLACK = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """N points with xyz positions (meters) and N x A attribute channels."""

    positions: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True).reshape(-1, 3)
        attrs = np.asarray(self.attributes, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs.reshape(len(pos), -1) if len(pos) else attrs.reshape(0, 0)
        attrs = np.array(attrs, copy=True)
        if attrs.shape[0] != pos.shape[0]:
            raise ValueError(
                f"attributes have {attrs.shape[0]} rows for {pos.shape[0]} points")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        pos.flags.writeable = False
        attrs.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "attributes", attrs)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.attributes.shape[1]

    def __len__(self):
        return self.n_points

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.positions[indices], self.attributes[indices])

    @classmethod
    def from_xyz(cls, positions, attributes=None) -> "PointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if attributes is None:
            attributes = np.zeros((len(positions), 0))
        return cls(positions, attributes)


def check_labels(labels, n_points: int, n_classes: int | None = None) -> np.ndarray:
    """Validate a label array against a cloud size and return it as int64."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_points:
        raise ValueError(f"expected {n_points} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
    labels = labels.astype(np.int64)
    bad = (labels < 0) & (labels != UNLABELED)
    if n_classes is not None:
        bad |= labels >= n_classes
    if np.any(bad):
        raise ValueError(f"invalid class id {labels[bad][0]}")
    return labels


@dataclass(frozen=True)
class SubsampleResult:
    sub_cloud: PointCloud
    sub_labels: np.ndarray
    parent_of: np.ndarray  # full-point index -> sub-point index
    voxel_size: float


def voxel_ids(positions: np.ndarray, d: float) -> np.ndarray:
    """Integer voxel coordinates, grid anchored at the cloud's minimum corner."""
    positions = np.asarray(positions, dtype=np.float64)
    origin = positions.min(axis=0)
    return np.floor((positions - origin) / d).astype(np.int64)


def grid_subsample(cloud: PointCloud, labels, d: float) -> SubsampleResult:
    """Replace every occupied voxel of side ``d`` by the barycenter of its points.

    Attributes are averaged, labels decided by majority vote over labeled
    members (ties go to the smallest class id, all-unlabeled voxels stay
    unlabeled). Output voxels are ordered lexicographically by voxel id.
    """
    if not d > 0:
        raise ValueError(f"voxel size must be positive, got {d}")
    if cloud.n_points == 0:
        raise ValueError("cannot subsample an empty cloud")
    labels = check_labels(labels, cloud.n_points)

    ids = voxel_ids(cloud.positions, d)
    _, parent_of, counts = np.unique(ids, axis=0, return_inverse=True, return_counts=True)
    parent_of = parent_of.reshape(-1)
    n_sub = counts.shape[0]

    def voxel_mean(values):
        out = np.zeros((n_sub, values.shape[1]))
        for j in range(values.shape[1]):
            out[:, j] = np.bincount(parent_of, weights=values[:, j], minlength=n_sub)
        return out / counts[:, None]

    sub_pos = voxel_mean(cloud.positions)
    sub_attr = voxel_mean(cloud.attributes) if cloud.n_attributes else np.zeros((n_sub, 0))

    sub_labels = np.full(n_sub, UNLABELED, dtype=np.int64)
    known = labels != UNLABELED
    if np.any(known):
        n_classes = int(labels[known].max()) + 1
        votes = np.bincount(parent_of[known] * n_classes + labels[known],
                            minlength=n_sub * n_classes).reshape(n_sub, n_classes)
        has_vote = votes.sum(axis=1) > 0
        sub_labels[has_vote] = np.argmax(votes[has_vote], axis=1)

    return SubsampleResult(PointCloud(sub_pos, sub_attr), sub_labels, parent_of, float(d))


def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return np.einsum("ij,ij->i", diff, diff)


class SpatialIndex:
    """Exact nearest-neighbor and radius queries over a fixed point set.

    A scipy kd-tree proposes candidates; membership and ordering are decided
    on squared Euclidean distances computed here, with distance ties broken
    by the smaller point index.
    """

    def __init__(self, positions):
        positions = np.array(positions, dtype=np.float64, copy=True).reshape(-1, 3)
        if positions.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        positions.flags.writeable = False
        self.positions = positions
        self._tree = cKDTree(positions, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def tree(self) -> cKDTree:
        return self._tree

    def knn(self, query, k: int) -> np.ndarray:
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        if k == n:
            cand = np.arange(n)
        else:
            dist, _ = self._tree.query(q, k=k)
            dk = float(np.atleast_1d(dist)[-1])
            cand = np.asarray(
                self._tree.query_ball_point(q, dk * (1 + _CANDIDATE_SLACK) + 1e-300),
                dtype=np.int64)
        d2 = _sq_dist(self.positions[cand], q)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def knn_batch(self, queries, k: int) -> np.ndarray:
        """Vectorized ``knn`` for many queries, same ordering rules."""
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if queries.shape[0] == 0:
            return np.zeros((0, k), dtype=np.int64)
        kq = min(k + 1, n)
        _, idx = self._tree.query(queries, k=kq)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), kq)
        diff = self.positions[idx] - queries[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        # sort each row by (d2, index): stable sort on index, then on distance
        rows = np.arange(len(queries))[:, None]
        keys = np.argsort(idx, axis=1, kind="stable")
        idx = idx[rows, keys]
        d2 = d2[rows, keys]
        keys = np.argsort(d2, axis=1, kind="stable")
        idx = idx[rows, keys]
        d2 = d2[rows, keys]
        out = idx[:, :k].copy()
        if kq > k:
            # rows whose k-th and (k+1)-th candidates (nearly) tie may hide
            # equally distant points outside the candidate set
            near_tie = d2[:, k] <= d2[:, k - 1] * (1 + 4 * _CANDIDATE_SLACK)
            for i in np.flatnonzero(near_tie):
                out[i] = self.knn(queries[i], k)
        return out

    def radius_neighbors(self, center, r: float) -> np.ndarray:
        """Indices (ascending) of all points within distance ``r`` of ``center``."""
        if not r > 0:
            raise ValueError(f"radius must be positive, got {r}")
        q = np.asarray(center, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + _CANDIDATE_SLACK)),
                          dtype=np.int64)
        if cand.size == 0:
            return cand
        keep = _sq_dist(self.positions[cand], q) <= r * r
        return np.sort(cand[keep])


def build_index(cloud: PointCloud) -> SpatialIndex:
    if cloud.n_points == 0:
        raise ValueError("cannot index an empty cloud")
    return SpatialIndex(cloud.positions)


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)


def radius_neighbors(index: SpatialIndex, center, r: float) -> np.ndarray:
    return index.radius_neighbors(center, r)


def nearest_label_transfer(sub_index: SpatialIndex, full_cloud: PointCloud,
                           sub_predictions) -> np.ndarray:
    """Give every full-resolution point the label of its nearest subsampled point."""
    if len(sub_index) == 0:
        raise ValueError("empty subsampled cloud")
    preds = check_labels(sub_predictions, len(sub_index))
    if np.any(preds == UNLABELED):
        raise ValueError("subsampled predictions contain unlabeled entries")
    if full_cloud.n_points == 0:
        return np.zeros(0, dtype=np.int64)
    nearest = sub_index.knn_batch(full_cloud.positions, 1)[:, 0]
    return preds[nearest]
