"""Two-stage training: weak labels only, then weak + adaptive pseudo-labels.

Stage 1 fits the backbone on the sparse ground truth. Stage 2 starts from
the stage-1 parameters, draws an initial pseudo-label set and trains on
``l_true + alpha * l_pseudo``; whenever the smallest per-batch accuracy of an
epoch exceeds ``convergence_threshold`` the pseudo-labels are thrown away
and regenerated from the current model. Under the ``PL`` strategy that
accuracy is measured on weak labels only, under ``PL_ALL`` on weak and
pseudo labels together.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .backbone import Backbone, MLPBackbone, ModelParams, log_softmax, sgd_step
from .geometry import UNLABELED, SpatialIndex
from .pseudo_labels import PseudoLabelSet, regenerate
from .weak_labels import WeakLabelSet

logger = logging.getLogger(__name__)

PL, PL_ALL = "PL", "PL_ALL"

LOG_COLUMNS = ("stage", "epoch", "min_batch_acc", "train_OA", "pseudo_count",
               "threshold", "loss_true", "loss_pseudo", "lr", "generation")


@dataclass
class TrainerConfig:
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    alpha: float = 1.0
    convergence_threshold: float = 0.99
    block_radius: float = 30.0
    batch_blocks: int = 1
    steps_per_epoch: Optional[int] = None  # None: ceil(N / points per step)
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.95
    seed: int = 0
    update_strategy: str = PL
    threshold_scope: str = "all"
    fixed_threshold: Optional[float] = None
    carry_velocity: bool = True
    hidden: tuple = (64, 64)

    def __post_init__(self):
        self.update_strategy = normalize_strategy(self.update_strategy)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.convergence_threshold < 1:
            raise ValueError("convergence_threshold must lie in (0, 1)")
        if not self.block_radius > 0:
            raise ValueError("block_radius must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_blocks < 1:
            raise ValueError("batch_blocks must be at least 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


def normalize_strategy(name: str) -> str:
    key = str(name).strip().upper().replace("-", "_")
    if key not in (PL, PL_ALL):
        raise ValueError(f"unknown update strategy {name!r}")
    return key


@dataclass
class TrainingData:
    """Standardized per-point features of the (subsampled) training cloud."""

    index: SpatialIndex
    features: np.ndarray
    n_classes: int
    truth: Optional[np.ndarray] = None  # only used for logging training OA

    @property
    def n_points(self) -> int:
        return self.features.shape[0]


@dataclass
class TrainState:
    params: ModelParams
    velocity: ModelParams
    trained_count: np.ndarray
    rng: np.random.Generator
    steps_per_epoch: int
    epoch: int = 0
    stage: int = 1
    per_epoch_min_accuracy: float = math.nan
    pseudo: Optional[PseudoLabelSet] = None
    history: list = field(default_factory=list)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _as_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError("boolean mask has the wrong length")
        return mask
    out = np.zeros(n, dtype=bool)
    out[mask.astype(np.int64)] = True
    return out


def masked_cross_entropy(logits, targets, mask):
    """Mean softmax cross-entropy over masked rows and its gradient wrt logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    mask = _as_mask(mask, n)
    grad = np.zeros_like(logits)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    rows = np.flatnonzero(mask)
    t = targets[rows]
    if np.any(t == UNLABELED) or np.any(t < 0) or np.any(t >= c):
        raise ValueError("masked rows need a valid target class")
    logp = log_softmax(logits[rows])
    loss = -float(logp[np.arange(count), t].sum()) / count
    g = np.exp(logp)
    g[np.arange(count), t] -= 1.0
    grad[rows] = g / count
    return loss, grad


def _combined(logits, weak_targets, weak_mask, pseudo_targets, pseudo_mask, alpha):
    n = np.asarray(logits).shape[0]
    weak_mask = _as_mask(weak_mask, n)
    pseudo_mask = _as_mask(pseudo_mask, n)
    if np.any(weak_mask & pseudo_mask):
        raise ValueError("weak and pseudo masks overlap")
    l_true, g_true = masked_cross_entropy(logits, weak_targets, weak_mask)
    l_pseudo, g_pseudo = masked_cross_entropy(logits, pseudo_targets, pseudo_mask)
    return l_true + alpha * l_pseudo, g_true + alpha * g_pseudo, l_true, l_pseudo


def combined_loss(logits, weak_targets, weak_mask, pseudo_targets, pseudo_mask,
                  alpha: float = 1.0):
    """``l_true + alpha * l_pseudo``, each averaged over its own mask."""
    loss, grad, _, _ = _combined(logits, weak_targets, weak_mask,
                                 pseudo_targets, pseudo_mask, alpha)
    return loss, grad


def epoch_convergence(per_batch_accuracies, threshold: float = 0.99) -> bool:
    accs = list(per_batch_accuracies)
    if not accs:
        raise ValueError("no batch accuracies to test")
    return min(accs) > threshold


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------

def sample_training_block(index: SpatialIndex, trained_count: np.ndarray, radius: float,
                          rng: np.random.Generator):
    """Pick the least-trained point (ties drawn uniformly) and take its ball.

    ``trained_count`` is incremented in place for every member.
    """
    if len(index) == 0:
        raise ValueError("empty cloud")
    candidates = np.flatnonzero(trained_count == trained_count.min())
    center = int(candidates[rng.integers(len(candidates))])
    members = index.radius_neighbors(index.positions[center], radius)
    trained_count[members] += 1
    return center, members


def estimate_steps_per_epoch(index: SpatialIndex, radius: float, batch_blocks: int,
                             seed: int, probes: int = 32) -> int:
    rng = np.random.default_rng([int(seed), 7])
    n = len(index)
    centers = rng.choice(n, size=min(probes, n), replace=False)
    sizes = [len(index.radius_neighbors(index.positions[c], radius)) for c in centers]
    return max(1, math.ceil(n / (batch_blocks * float(np.mean(sizes)))))


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def init_state(data: TrainingData, cfg: TrainerConfig,
               backbone: Backbone | None = None) -> TrainState:
    backbone = backbone or MLPBackbone(cfg.hidden)
    params = backbone.init_params(data.features.shape[1], data.n_classes,
                                  np.random.default_rng([cfg.seed, 0]))
    steps = cfg.steps_per_epoch or estimate_steps_per_epoch(
        data.index, cfg.block_radius, cfg.batch_blocks, cfg.seed)
    return TrainState(params=params, velocity=params.zeros_like(),
                      trained_count=np.zeros(data.n_points, dtype=np.int64),
                      rng=np.random.default_rng([cfg.seed, 1]), steps_per_epoch=steps)


def _predict(backbone, data: TrainingData, params) -> np.ndarray:
    return np.argmax(backbone.forward(data.features, params), axis=1)


def _train_oa(backbone, data: TrainingData, params) -> float:
    if data.truth is None:
        return math.nan
    known = data.truth != UNLABELED
    if not known.any():
        return math.nan
    pred = _predict(backbone, data, params)
    return float(np.mean(pred[known] == data.truth[known]))


def _run_epoch(state: TrainState, data: TrainingData, cfg: TrainerConfig, backbone,
               weak_targets: np.ndarray, pseudo_targets: np.ndarray, lr: float,
               score_pseudo: bool):
    """One pass of block batches; returns (batch accuracies, mean l_true, mean l_pseudo)."""
    weak_mask = weak_targets != UNLABELED
    pseudo_mask = pseudo_targets != UNLABELED
    accs, l_true_sum, l_pseudo_sum, updates = [], 0.0, 0.0, 0
    for _ in range(state.steps_per_epoch):
        blocks = [sample_training_block(data.index, state.trained_count, cfg.block_radius,
                                        state.rng)[1] for _ in range(cfg.batch_blocks)]
        members = blocks[0] if len(blocks) == 1 else np.unique(np.concatenate(blocks))
        rows = members[weak_mask[members] | pseudo_mask[members]]
        if rows.size == 0:
            continue
        feats = data.features[rows]
        logits = backbone.forward(feats, state.params)
        w_t, p_t = weak_targets[rows], pseudo_targets[rows]
        w_m, p_m = w_t != UNLABELED, p_t != UNLABELED
        _, grad, l_true, l_pseudo = _combined(logits, w_t, w_m, p_t, p_m, cfg.alpha)

        scored = w_m | p_m if score_pseudo else w_m
        if scored.any():
            pred = np.argmax(logits[scored], axis=1)
            target = np.where(w_m, w_t, p_t)[scored]
            accs.append(float(np.mean(pred == target)))

        grads = backbone.gradient(feats, state.params, grad)
        state.params, state.velocity = sgd_step(state.params, grads, lr, cfg.momentum,
                                                state.velocity)
        l_true_sum += l_true
        l_pseudo_sum += l_pseudo
        updates += 1
    denom = max(updates, 1)
    return accs, l_true_sum / denom, l_pseudo_sum / denom


def _record(stage, epoch, accs, train_oa, pseudo, l_true, l_pseudo, lr) -> dict:
    return {
        "stage": stage,
        "epoch": epoch,
        "min_batch_acc": min(accs) if accs else math.nan,
        "train_OA": train_oa,
        "pseudo_count": len(pseudo) if pseudo is not None else 0,
        "threshold": pseudo.threshold_used if pseudo is not None else math.nan,
        "loss_true": l_true,
        "loss_pseudo": l_pseudo,
        "lr": lr,
        "generation": pseudo.generation if pseudo is not None else 0,
    }


EpochCallback = Callable[[TrainState, dict], None]


def train_incomplete(data: TrainingData, weak: WeakLabelSet, cfg: TrainerConfig,
                     backbone: Backbone | None = None, state: TrainState | None = None,
                     on_epoch: EpochCallback | None = None) -> TrainState:
    """Stage 1: momentum SGD on the weak labels only."""
    if weak is None or len(weak) == 0:
        raise ValueError("stage 1 needs at least one weak label")
    backbone = backbone or MLPBackbone(cfg.hidden)
    state = state or init_state(data, cfg, backbone)
    weak_targets = weak.targets(data.n_points)
    no_pseudo = np.full(data.n_points, UNLABELED, dtype=np.int64)
    while state.epoch < cfg.epochs_stage1:
        lr = cfg.learning_rate * cfg.lr_decay ** state.epoch
        accs, l_true, _ = _run_epoch(state, data, cfg, backbone, weak_targets, no_pseudo,
                                     lr, score_pseudo=False)
        state.epoch += 1
        state.per_epoch_min_accuracy = min(accs) if accs else math.nan
        rec = _record(1, state.epoch, accs, _train_oa(backbone, data, state.params),
                      None, l_true, 0.0, lr)
        state.history.append(rec)
        logger.info("stage 1 epoch %d: min acc %.4f loss %.4f", state.epoch,
                    rec["min_batch_acc"], l_true)
        if on_epoch:
            on_epoch(state, rec)
    return state


RegenerateCallback = Callable[[Optional[PseudoLabelSet], PseudoLabelSet], None]


def train_pseudo_assisted(state: TrainState, data: TrainingData, weak: WeakLabelSet,
                          cfg: TrainerConfig, backbone: Backbone | None = None,
                          on_epoch: EpochCallback | None = None,
                          on_regenerate: RegenerateCallback | None = None) -> TrainState:
    """Stage 2: pseudo-label assisted training under a fixed epoch budget."""
    if state is None or state.stage != 1:
        raise ValueError("stage 2 needs the state returned by stage 1")
    backbone = backbone or MLPBackbone(cfg.hidden)
    state.params = state.params.copy()
    if not cfg.carry_velocity:
        state.velocity = state.params.zeros_like()
    state.stage, state.epoch = 2, 0

    def refresh(previous):
        new = regenerate(backbone, state.params, data.features, weak,
                         previous.generation if previous else 0,
                         scope=cfg.threshold_scope, fixed_threshold=cfg.fixed_threshold)
        if on_regenerate:
            on_regenerate(previous, new)
        return new

    state.pseudo = refresh(None)
    weak_targets = weak.targets(data.n_points)
    score_pseudo = cfg.update_strategy == PL_ALL
    while state.epoch < cfg.epochs_stage2:
        lr = cfg.learning_rate * cfg.lr_decay ** state.epoch
        pseudo_targets = np.full(data.n_points, UNLABELED, dtype=np.int64)
        pseudo_targets[state.pseudo.indices] = state.pseudo.labels
        accs, l_true, l_pseudo = _run_epoch(state, data, cfg, backbone, weak_targets,
                                            pseudo_targets, lr, score_pseudo)
        state.epoch += 1
        state.per_epoch_min_accuracy = min(accs) if accs else math.nan
        if accs and epoch_convergence(accs, cfg.convergence_threshold):
            state.pseudo = refresh(state.pseudo)
        rec = _record(2, state.epoch, accs, _train_oa(backbone, data, state.params),
                      state.pseudo, l_true, l_pseudo, lr)
        state.history.append(rec)
        logger.info("stage 2 epoch %d: min acc %.4f pseudo %d gen %d", state.epoch,
                    rec["min_batch_acc"], rec["pseudo_count"], rec["generation"])
        if on_epoch:
            on_epoch(state, rec)
    return state


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def format_log_value(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_epoch_log(path, history):
    lines = [",".join(LOG_COLUMNS)]
    for rec in history:
        lines.append(",".join(format_log_value(rec[c]) for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_epoch_log(path) -> list:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        row = {}
        for key, raw in zip(header, line.split(",")):
            if key in ("stage", "epoch", "pseudo_count", "generation"):
                row[key] = int(raw)
            else:
                row[key] = float(raw) if raw else math.nan
        out.append(row)
    return out


def save_state(path, state: TrainState):
    arrays = {f"param{i}": a for i, a in enumerate(state.params.arrays())}
    arrays.update({f"velocity{i}": a for i, a in enumerate(state.velocity.arrays())})
    meta = {
        "n_arrays": len(state.params.arrays()),
        "epoch": state.epoch,
        "stage": state.stage,
        "steps_per_epoch": state.steps_per_epoch,
        "per_epoch_min_accuracy": state.per_epoch_min_accuracy,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    if state.pseudo is not None:
        p = state.pseudo
        arrays.update(pseudo_indices=p.indices, pseudo_labels=p.labels,
                      pseudo_confidences=p.confidences)
        meta["pseudo"] = {"generation": p.generation, "threshold": p.threshold_used}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), trained_count=state.trained_count,
                 **arrays)


def load_state(path) -> TrainState:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        n = meta["n_arrays"]
        params = ModelParams.from_arrays(data[f"param{i}"] for i in range(n))
        velocity = ModelParams.from_arrays(data[f"velocity{i}"] for i in range(n))
        pseudo = None
        if "pseudo" in meta:
            pseudo = PseudoLabelSet(data["pseudo_indices"], data["pseudo_labels"],
                                    data["pseudo_confidences"], meta["pseudo"]["generation"],
                                    meta["pseudo"]["threshold"])
        trained_count = data["trained_count"].copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(params, velocity, trained_count, rng, meta["steps_per_epoch"],
                      meta["epoch"], meta["stage"], meta["per_epoch_min_accuracy"],
                      pseudo, meta["history"])


def config_dict(cfg: TrainerConfig) -> dict:
    return asdict(cfg)
