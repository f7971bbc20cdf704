"""Per-point classifier: hand-crafted geometric features and a small MLP.

Any object with ``forward(features, params)`` and
``gradient(features, params, grad_logits)`` can stand in for the reference
network (see :class:`Backbone`); the trainer only relies on that contract.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import PointCloud, SpatialIndex

CHECKPOINT_VERSION = 1
EIGEN_FEATURES = ("linearity", "planarity", "sphericity", "verticality")


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    scale_radii: tuple
    names: tuple = ()

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


def covariance_eigen(points: np.ndarray):
    """Eigenvalues (descending) and eigenvectors of a neighborhood covariance."""
    q = points - points.mean(axis=0)
    cov = q.T @ q / points.shape[0]
    w, v = np.linalg.eigh(cov)
    return w[::-1], v[:, ::-1]


def eigen_features(eigvals: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Linearity, planarity, sphericity, verticality from sorted eigenvalues.

    ``eigvals`` is (..., 3) with λ1 ≥ λ2 ≥ λ3, ``normals`` the unit
    eigenvectors of λ3. Rows with λ1 == 0 come out all zero.
    """
    eigvals = np.clip(eigvals, 0.0, None)
    l1, l2, l3 = eigvals[..., 0], eigvals[..., 1], eigvals[..., 2]
    ok = l1 > 0
    safe = np.where(ok, l1, 1.0)
    out = np.stack([
        (l1 - l2) / safe,
        (l2 - l3) / safe,
        l3 / safe,
        1.0 - np.abs(normals[..., 2]),
    ], axis=-1)
    out[~ok] = 0.0
    return out


def _thin_ranks(n_valid: np.ndarray, k: int):
    """Pick at most k ranks spread evenly over each row's sorted neighbors."""
    j = np.arange(k)
    spread = np.floor(j[None, :] * (n_valid[:, None] - 1) / (k - 1) + 0.5).astype(np.int64)
    dense = np.broadcast_to(j, spread.shape)
    ranks = np.where(n_valid[:, None] > k, spread, dense)
    mask = ranks < n_valid[:, None]
    return np.where(mask, ranks, 0), mask


def extract_features(cloud: PointCloud, index: SpatialIndex, k: int = 16,
                     scale_radii: Sequence[float] = (1.0, 2.0, 5.0),
                     chunk_size: int = 1024) -> FeatureMatrix:
    """Multi-scale covariance features, local height and raw attributes.

    For every radius the neighborhood is the set of points within that
    radius, thinned to at most ``k`` points spread evenly by distance rank
    (nearest point always kept). Fewer than 3 neighbors gives zero eigen
    features. Height is measured above the lowest point within the largest
    radius.
    """
    if k < 3:
        raise ValueError(f"k must be at least 3, got {k}")
    if cloud.n_points == 0:
        raise ValueError("cannot extract features from an empty cloud")
    radii = tuple(float(r) for r in scale_radii)
    if not radii or min(radii) <= 0:
        raise ValueError("scale radii must be positive and non-empty")
    r_max = max(radii)
    pos = cloud.positions
    n = cloud.n_points
    tree = index.tree

    eig = np.zeros((n, len(radii), 4))
    height = np.zeros(n)
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        q = pos[start:stop]
        counts = tree.query_ball_point(q, r_max, return_length=True)
        kmax = int(min(counts.max(), len(index)))
        dist, idx = tree.query(q, k=max(kmax, 1), distance_upper_bound=r_max * (1 + 1e-12))
        dist = dist.reshape(len(q), -1)
        idx = idx.reshape(len(q), -1)
        inside = np.isfinite(dist)
        safe_idx = np.where(inside, idx, 0)
        nbr_z = np.where(inside, pos[safe_idx, 2], np.inf)
        height[start:stop] = q[:, 2] - nbr_z.min(axis=1)

        for s, r in enumerate(radii):
            n_valid = (dist <= r).sum(axis=1)
            ranks, mask = _thin_ranks(n_valid, k)
            rows = np.arange(len(q))[:, None]
            pts = pos[safe_idx[rows, ranks]]
            w = mask.astype(np.float64)
            cnt = np.maximum(w.sum(axis=1), 1.0)
            mean = np.einsum("ij,ijk->ik", w, pts) / cnt[:, None]
            centered = (pts - mean[:, None, :]) * w[:, :, None]
            cov = np.einsum("ijk,ijl->ikl", centered, centered) / cnt[:, None, None]
            vals, vecs = np.linalg.eigh(cov)
            vals = vals[:, ::-1]
            feats = eigen_features(vals, vecs[:, :, 0])
            feats[n_valid < 3] = 0.0
            eig[start:stop, s] = feats

    names = [f"{name}@{r:g}" for r in radii for name in EIGEN_FEATURES]
    names.append("height")
    names += [f"attr{j}" for j in range(cloud.n_attributes)]
    values = np.concatenate([eig.reshape(n, -1), height[:, None], cloud.attributes], axis=1)
    return FeatureMatrix(values, radii, tuple(names))


@dataclass(frozen=True)
class Standardizer:
    """Per-channel z-score fitted on training features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass
class ModelParams:
    weights: list
    biases: list

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays) -> "ModelParams":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2])

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(a.copy() for a in self.arrays())

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_arrays(np.zeros_like(a) for a in self.arrays())


def init_params(layer_sizes: Sequence[int], rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


def _check_width(features: np.ndarray, params: ModelParams):
    if features.ndim != 2 or features.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"features of shape {features.shape} do not fit first layer "
            f"{params.weights[0].shape}")


def _forward_all(features, params):
    acts = [features]
    h = features
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward(features, params: ModelParams) -> np.ndarray:
    """Class logits: tanh hidden layers, linear output layer."""
    features = np.asarray(features, dtype=np.float64)
    _check_width(features, params)
    return _forward_all(features, params)[-1]


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_gradient(features, params: ModelParams, grad_at_logits) -> ModelParams:
    """Reverse-mode gradient of a scalar loss given dLoss/dLogits."""
    features = np.asarray(features, dtype=np.float64)
    _check_width(features, params)
    grad = np.asarray(grad_at_logits, dtype=np.float64)
    n_out = params.weights[-1].shape[1]
    if grad.shape != (features.shape[0], n_out):
        raise ValueError(f"gradient shape {grad.shape} != logits shape "
                         f"{(features.shape[0], n_out)}")
    acts = _forward_all(features, params)
    gw, gb = [], []
    for i in range(len(params.weights) - 1, -1, -1):
        gw.append(acts[i].T @ grad)
        gb.append(grad.sum(axis=0))
        if i > 0:
            grad = (grad @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return ModelParams(gw[::-1], gb[::-1])


def sgd_step(params: ModelParams, grads: ModelParams, learning_rate: float,
             momentum: float = 0.0, velocity: ModelParams | None = None):
    """One momentum-SGD update; returns ``(new_params, new_velocity)``."""
    if not learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if velocity is None:
        velocity = params.zeros_like()
    new_v = [momentum * v + g for v, g in zip(velocity.arrays(), grads.arrays())]
    new_p = [p - learning_rate * v for p, v in zip(params.arrays(), new_v)]
    return ModelParams.from_arrays(new_p), ModelParams.from_arrays(new_v)


class Backbone(Protocol):
    def init_params(self, n_features: int, n_classes: int,
                    rng: np.random.Generator) -> ModelParams: ...

    def forward(self, features: np.ndarray, params: ModelParams) -> np.ndarray: ...

    def gradient(self, features: np.ndarray, params: ModelParams,
                 grad_logits: np.ndarray) -> ModelParams: ...


@dataclass(frozen=True)
class MLPBackbone:
    hidden: tuple = (64, 64)

    def init_params(self, n_features, n_classes, rng):
        return init_params([n_features, *self.hidden, n_classes], rng)

    def forward(self, features, params):
        return forward(features, params)

    def gradient(self, features, params, grad_logits):
        return loss_gradient(features, params, grad_logits)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Model:
    """Everything needed to predict on a new cloud."""

    params: ModelParams
    standardizer: Standardizer
    k: int
    scale_radii: tuple
    n_classes: int
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def features(self, cloud: PointCloud, index: SpatialIndex) -> np.ndarray:
        raw = extract_features(cloud, index, self.k, self.scale_radii)
        return self.standardizer.transform(raw.values)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(forward(features, self.params))


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_model(path, model: Model):
    meta = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": model.params.layer_sizes,
        "k": model.k,
        "scale_radii": list(model.scale_radii),
        "n_classes": model.n_classes,
        "config_hash": model.config_hash,
        "extra": model.meta,
    }
    arrays = {f"param{i}": a for i, a in enumerate(model.params.arrays())}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)),
                 feature_mean=model.standardizer.mean,
                 feature_std=model.standardizer.std, **arrays)


def load_model(path) -> Model:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        n_arrays = 2 * (len(meta["layer_sizes"]) - 1)
        params = ModelParams.from_arrays(data[f"param{i}"] for i in range(n_arrays))
        std = Standardizer(data["feature_mean"], data["feature_std"])
    if params.layer_sizes != meta["layer_sizes"]:
        raise ValueError("checkpoint layer shapes are inconsistent")
    return Model(params, std, meta["k"], tuple(meta["scale_radii"]),
                 meta["n_classes"], meta["config_hash"], meta.get("extra", {}))
