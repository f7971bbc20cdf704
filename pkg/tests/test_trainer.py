import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakseg.backbone import MLPBackbone
from weakseg.geometry import UNLABELED, PointCloud, build_index
from weakseg.pseudo_labels import PseudoLabelSet
from weakseg.trainer import (
    PL, PL_ALL, TrainerConfig, TrainingData, combined_loss, epoch_convergence,
    estimate_steps_per_epoch, init_state, load_state, masked_cross_entropy,
    normalize_strategy, read_epoch_log, sample_training_block, save_state, train_incomplete,
    train_pseudo_assisted, write_epoch_log,
)
from weakseg.weak_labels import WeakLabelSet, sample_weak_labels


def direct_ce(logits, targets, rows):
    total = 0.0
    for i in rows:
        z = logits[i]
        p = math.exp(z[targets[i]]) / sum(math.exp(v) for v in z)
        total -= math.log(p)
    return total / len(rows)


# -- losses ------------------------------------------------------------------

def test_uniform_logits_give_log_c():
    loss, grad = masked_cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]), [1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert np.all(grad[[0, 2, 4]] == 0)


def test_empty_mask():
    loss, grad = masked_cross_entropy(np.ones((3, 2)), np.full(3, UNLABELED), [])
    assert loss == 0.0 and np.array_equal(grad, np.zeros((3, 2)))


def test_two_point_instance_against_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=(2, 3)) * 3
        targets = rng.integers(0, 3, 2)
        loss, grad = masked_cross_entropy(logits, targets, [0, 1])
        assert loss == pytest.approx(direct_ce(logits, targets, [0, 1]), abs=1e-12)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(grad, (p - np.eye(3)[targets]) / 2, atol=1e-12)


def test_sentinel_target_in_mask_is_rejected():
    with pytest.raises(ValueError):
        masked_cross_entropy(np.zeros((2, 2)), np.array([0, UNLABELED]), [1])


def test_large_logits_stay_finite():
    loss, grad = masked_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]), [0])
    assert loss == pytest.approx(2000.0) and np.all(np.isfinite(grad))


def test_combined_loss_cases():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(8, 3))
    weak_t = np.array([0, UNLABELED, 2, UNLABELED, UNLABELED, 1, UNLABELED, UNLABELED])
    pseudo_t = np.array([UNLABELED, 1, UNLABELED, 0, 2, UNLABELED, UNLABELED, UNLABELED])
    wm, pm = weak_t != UNLABELED, pseudo_t != UNLABELED
    l_true, g_true = masked_cross_entropy(logits, weak_t, wm)
    l_pseudo, g_pseudo = masked_cross_entropy(logits, pseudo_t, pm)
    assert combined_loss(logits, weak_t, wm, pseudo_t, np.zeros(8, bool))[0] == l_true
    assert combined_loss(logits, weak_t, wm, pseudo_t, pm, alpha=0.0)[0] == l_true
    loss, grad = combined_loss(logits, weak_t, wm, pseudo_t, pm, alpha=1.0)
    assert loss == pytest.approx(l_true + l_pseudo, abs=1e-12)
    assert np.allclose(grad, g_true + g_pseudo, atol=1e-12)
    # gradient support
    assert np.all(g_true[~wm] == 0) and np.all(g_pseudo[~pm] == 0)
    assert np.all(grad[~(wm | pm)] == 0)
    with pytest.raises(ValueError):
        combined_loss(logits, weak_t, wm, weak_t, wm)


# -- convergence and blocks --------------------------------------------------------

def test_convergence_rule():
    assert epoch_convergence([1.0, 0.995], 0.99)
    assert not epoch_convergence([1.0, 0.99], 0.99)
    assert not epoch_convergence([0.5], 0.99)
    with pytest.raises(ValueError):
        epoch_convergence([], 0.99)


def line_index(n=10, spacing=1.0):
    pts = np.zeros((n, 3))
    pts[:, 0] = np.arange(n) * spacing
    return build_index(PointCloud.from_xyz(pts))


def test_block_center_is_least_trained():
    index = line_index(3)
    counts = np.array([2, 0, 1])
    center, members = sample_training_block(index, counts, 0.5, np.random.default_rng(0))
    assert center == 1 and members.tolist() == [1]
    assert counts.tolist() == [2, 1, 1]


def test_block_sampling_is_seeded_and_counts_grow():
    index = line_index(20)
    a, b = np.zeros(20, np.int64), np.zeros(20, np.int64)
    ra, rb = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(30):
        before = a.copy()
        ca, ma = sample_training_block(index, a, 2.5, ra)
        cb, mb = sample_training_block(index, b, 2.5, rb)
        assert ca == cb and ma.tolist() == mb.tolist()
        assert np.all(a[ma] > before[ma])
        assert a.sum() - before.sum() == len(ma)


def test_empty_cloud_block_rejected():
    class Empty:
        def __len__(self):
            return 0
    with pytest.raises(ValueError):
        sample_training_block(Empty(), np.zeros(0, np.int64), 1.0, np.random.default_rng(0))


def test_steps_per_epoch_estimate():
    index = line_index(100)
    # interior blocks of radius 2 hold 5 points
    assert estimate_steps_per_epoch(index, 2.0, 1, 0) in range(20, 24)
    assert estimate_steps_per_epoch(index, 1000.0, 1, 0) == 1


def test_strategy_names():
    assert normalize_strategy("pl-all") == PL_ALL
    assert normalize_strategy("pl") == PL
    with pytest.raises(ValueError):
        normalize_strategy("other")


def test_config_validation():
    for bad in (dict(alpha=-1), dict(convergence_threshold=1.0), dict(block_radius=0),
                dict(epochs_stage1=-1), dict(learning_rate=0)):
        with pytest.raises(ValueError):
            TrainerConfig(**bad)


# -- training loops ------------------------------------------------------------

def separable_scene(seed, n=400):
    """Two well-separated classes along x; features are the raw coordinates."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    pts = rng.uniform(0, 10, size=(n, 3))
    pts[labels == 1, 0] += 12
    index = build_index(PointCloud.from_xyz(pts))
    feats = (pts - pts.mean(axis=0)) / pts.std(axis=0)
    return TrainingData(index, feats, 2, labels), labels


def small_cfg(**kw):
    base = dict(epochs_stage1=10, epochs_stage2=10, block_radius=6.0, learning_rate=0.05,
                hidden=(8,), seed=0)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separable_scene_is_learned(seed):
    data, labels = separable_scene(seed)
    weak = sample_weak_labels(labels, 5, seed=seed)
    state = train_incomplete(data, weak, small_cfg(epochs_stage1=100, seed=seed))
    pred = np.argmax(MLPBackbone((8,)).forward(data.features[weak.indices], state.params), 1)
    assert np.mean(pred == weak.labels) >= 0.99
    assert len(state.history) == 100


def test_zero_epochs_keep_initial_params():
    data, labels = separable_scene(0)
    weak = sample_weak_labels(labels, 5, seed=0)
    cfg = small_cfg(epochs_stage1=0)
    init = init_state(data, cfg, MLPBackbone(cfg.hidden))
    state = train_incomplete(data, weak, cfg)
    for a, b in zip(state.params.arrays(), init.params.arrays()):
        assert np.array_equal(a, b)
    assert state.history == []


def test_empty_weak_set_rejected():
    data, _ = separable_scene(0)
    empty = WeakLabelSet(np.zeros(0, np.int64), np.zeros(0, np.int64), 0, 0)
    with pytest.raises(ValueError):
        train_incomplete(data, empty, small_cfg())


def test_same_seed_is_bit_identical(tmp_path):
    data, labels = separable_scene(3)
    weak = sample_weak_labels(labels, 5, seed=0)
    runs = []
    for name in ("a", "b"):
        s = train_incomplete(data, weak, small_cfg())
        s = train_pseudo_assisted(s, data, weak, small_cfg())
        write_epoch_log(tmp_path / f"{name}.csv", s.history)
        runs.append(s)
    for a, b in zip(runs[0].params.arrays(), runs[1].params.arrays()):
        assert np.array_equal(a, b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_stage2_needs_stage1_state():
    data, labels = separable_scene(0)
    weak = sample_weak_labels(labels, 5, seed=0)
    with pytest.raises(ValueError):
        train_pseudo_assisted(None, data, weak, small_cfg())


def test_empty_pseudo_set_matches_continued_stage1(monkeypatch):
    import weakseg.trainer as trainer_mod

    def nothing(backbone, params, features, weak, generation, **kw):
        return PseudoLabelSet.empty(generation + 1)

    monkeypatch.setattr(trainer_mod, "regenerate", nothing)
    data, labels = separable_scene(4)
    weak = sample_weak_labels(labels, 5, seed=0)
    cfg = small_cfg(lr_decay=1.0)
    s2 = train_pseudo_assisted(train_incomplete(data, weak, cfg), data, weak, cfg)
    ref = train_incomplete(data, weak, small_cfg(lr_decay=1.0, epochs_stage1=20))
    for a, b in zip(s2.params.arrays(), ref.params.arrays()):
        assert np.array_equal(a, b)
    assert all(r["pseudo_count"] == 0 for r in s2.history)


def test_stage2_budget_and_regeneration_log():
    data, labels = separable_scene(5)
    weak = sample_weak_labels(labels, 5, seed=0)
    cfg = small_cfg(epochs_stage2=15)
    events = []
    s = train_incomplete(data, weak, cfg)
    s = train_pseudo_assisted(s, data, weak, cfg,
                              on_regenerate=lambda prev, new: events.append((prev, new)))
    stage2 = [r for r in s.history if r["stage"] == 2]
    assert len(stage2) == 15
    triggered = sum(r["min_batch_acc"] > 0.99 for r in stage2)
    assert stage2[-1]["generation"] - 1 == triggered
    assert len(events) == triggered + 1
    assert events[0][0] is None
    for prev, new in events[1:]:
        assert new.generation == prev.generation + 1


@pytest.mark.parametrize("seed", [0, 1])
def test_pl_regenerates_at_least_as_often_as_pl_all(seed):
    data, labels = separable_scene(seed)
    weak = sample_weak_labels(labels, 5, seed=seed)
    counts = {}
    for strategy in (PL, PL_ALL):
        cfg = small_cfg(update_strategy=strategy, seed=seed, epochs_stage1=3, epochs_stage2=20)
        s = train_incomplete(data, weak, cfg)
        s = train_pseudo_assisted(s, data, weak, cfg)
        counts[strategy] = s.pseudo.generation
    assert counts[PL] >= counts[PL_ALL]


def test_state_round_trip(tmp_path):
    data, labels = separable_scene(6)
    weak = sample_weak_labels(labels, 5, seed=0)
    cfg = small_cfg(epochs_stage1=4)
    s = train_incomplete(data, weak, cfg)
    s.pseudo = PseudoLabelSet(np.array([1, 2]), np.array([0, 1]), np.array([0.9, 0.8]), 3, 0.7)
    save_state(tmp_path / "s.npz", s)
    back = load_state(tmp_path / "s.npz")
    assert back.epoch == 4 and back.pseudo.generation == 3
    assert np.array_equal(back.trained_count, s.trained_count)
    assert back.rng.integers(1 << 30) == s.rng.integers(1 << 30)
    s.pseudo = None
    # resuming a saved stage 1 state continues exactly like the original
    more = TrainerConfig(**{**cfg.__dict__, "epochs_stage1": 6})
    a = train_incomplete(data, weak, more, state=load_state(tmp_path / "s.npz"))
    ref = train_incomplete(data, weak, more)
    for x, y in zip(a.params.arrays(), ref.params.arrays()):
        assert np.array_equal(x, y)


def test_epoch_log_round_trip(tmp_path):
    data, labels = separable_scene(7)
    weak = sample_weak_labels(labels, 5, seed=0)
    s = train_incomplete(data, weak, small_cfg(epochs_stage1=3))
    write_epoch_log(tmp_path / "log.csv", s.history)
    back = read_epoch_log(tmp_path / "log.csv")
    assert [r["epoch"] for r in back] == [1, 2, 3]
    assert back[0]["loss_true"] == s.history[0]["loss_true"]
    assert math.isnan(back[0]["threshold"])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 12), c=st.integers(2, 5),
       alpha=st.floats(0, 3))
def test_combined_loss_gradient_matches_finite_differences(seed, n, c, alpha):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, c))
    split = rng.integers(0, 3, n)  # 0 weak, 1 pseudo, 2 none
    targets = rng.integers(0, c, n)
    wt = np.where(split == 0, targets, UNLABELED)
    pt = np.where(split == 1, targets, UNLABELED)
    _, grad = combined_loss(logits, wt, split == 0, pt, split == 1, alpha)
    h = 1e-6
    num = np.zeros_like(logits)
    for i in range(n):
        for j in range(c):
            up, dn = logits.copy(), logits.copy()
            up[i, j] += h
            dn[i, j] -= h
            num[i, j] = (combined_loss(up, wt, split == 0, pt, split == 1, alpha)[0]
                         - combined_loss(dn, wt, split == 0, pt, split == 1, alpha)[0]) / (2 * h)
    assert np.allclose(grad, num, atol=1e-7)
