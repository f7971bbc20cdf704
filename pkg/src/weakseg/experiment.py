"""End-to-end runs: subsample, weak labels, two training stages, evaluation.

A run directory holds the stage 1 artefacts at its top level and one
subdirectory per stage 2 strategy (``baseline``, ``pl``, ``pl-all``).
Everything is first written to ``<dir>.partial`` and renamed on success.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .backbone import Model, Standardizer, config_hash, extract_features, load_model, save_model
from .config import ExperimentConfig
from .evaluation import (
    accumulate_confusion, error_map, metrics_report, write_report_csv, write_report_json,
)
from .geometry import UNLABELED, PointCloud, build_index, grid_subsample, nearest_label_transfer
from .io import ColumnMapping, read_pointcloud_text, write_error_map, write_predictions
from .pseudo_labels import write_pseudo_snapshot
from .synthetic import generate_synthetic_scene
from .trainer import (
    TrainingData, load_state, save_state, train_incomplete, train_pseudo_assisted,
    write_epoch_log,
)
from .weak_labels import read_weak_labels, sample_weak_labels, write_weak_labels

logger = logging.getLogger(__name__)

SCALE_NOTE = ("Desk-scale run: absolute accuracies are not comparable with "
              "benchmark-scale results; only trends are meaningful.")


class StageError(RuntimeError):
    """A pipeline step failed; the message names the step."""


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (OSError, ValueError) as exc:
        raise StageError(f"{name}: {exc}") from exc


@dataclass
class Prepared:
    cloud: PointCloud
    labels: np.ndarray
    class_names: list
    sub_labels: np.ndarray
    data: TrainingData
    standardizer: Standardizer


def load_split(cfg: ExperimentConfig, split: str):
    """``(cloud, labels, class_names)`` for ``"train"`` or ``"test"``."""
    if cfg.synthetic:
        seed = cfg.train_scene_seed if split == "train" else cfg.test_scene_seed
        cloud, labels, names = generate_synthetic_scene(cfg.scene(seed))
        return cloud, labels, list(cfg.class_names or names)
    path = cfg.train_file if split == "train" or not cfg.test_file else cfg.test_file
    n_classes = len(cfg.class_names) or None
    cloud, labels = read_pointcloud_text(path, ColumnMapping.parse(cfg.columns), n_classes)
    names = list(cfg.class_names)
    if not names:
        top = int(labels.max()) if np.any(labels != UNLABELED) else 0
        names = [f"class_{c}" for c in range(top + 1)]
    return cloud, labels, names


def prepare_training(cfg: ExperimentConfig) -> Prepared:
    cloud, labels, names = load_split(cfg, "train")
    sub = grid_subsample(cloud, labels, cfg.voxel_size)
    index = build_index(sub.sub_cloud)
    raw = extract_features(sub.sub_cloud, index, cfg.feature_k, cfg.feature_radii)
    std = Standardizer.fit(raw.values)
    data = TrainingData(index, std.transform(raw.values), len(names), sub.sub_labels)
    logger.info("training cloud: %d points, %d after subsampling", cloud.n_points,
                sub.sub_cloud.n_points)
    return Prepared(cloud, labels, names, sub.sub_labels, data, std)


def predict_cloud(model: Model, cloud: PointCloud, voxel_size: float) -> np.ndarray:
    """Predict on a subsampled copy and carry labels back to every point."""
    sub = grid_subsample(cloud, np.full(cloud.n_points, UNLABELED), voxel_size)
    index = build_index(sub.sub_cloud)
    probs = model.predict_proba(model.features(sub.sub_cloud, index))
    return nearest_label_transfer(index, cloud, np.argmax(probs, axis=1))


@contextmanager
def staged_dir(final: Path, overwrite: bool = False):
    """Yield ``<final>.partial`` and move it into place when the block succeeds."""
    final = Path(final)
    if final.exists() and not overwrite:
        raise FileExistsError(f"{final} exists; pass overwrite to replace it")
    partial = final.with_name(final.name + ".partial")
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir(parents=True)
    yield partial
    if final.exists():
        shutil.rmtree(final)
    partial.rename(final)


def _model(cfg: ExperimentConfig, prep: Prepared, params, stage: str) -> Model:
    meta = {"voxel_size": cfg.voxel_size, "class_names": prep.class_names, "stage": stage}
    return Model(params, prep.standardizer, cfg.feature_k, tuple(cfg.feature_radii),
                 len(prep.class_names),
                 config_hash({k: v for k, v in cfg.as_dict().items() if k != "output_dir"}), meta)


def _timestamp() -> str:
    return "written " + datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def evaluate_model(model: Model, cfg: ExperimentConfig, out: Path, class_names,
                   test=None) -> dict:
    """Predict on the test split, write predictions, error map and metrics."""
    cloud, truth, _ = test if test is not None else load_split(cfg, "test")
    pred = predict_cloud(model, cloud, cfg.voxel_size)
    write_predictions(out / "predictions.txt", cloud, pred)
    write_error_map(out / "error_map.txt", cloud, error_map(pred, truth))
    report = metrics_report(accumulate_confusion(pred, truth, len(class_names)), class_names)
    report["evaluated_on"] = "test" if (cfg.synthetic or cfg.test_file) else "train"
    report["note"] = SCALE_NOTE
    write_report_json(out / "metrics.json", report)
    write_report_csv(out / "metrics.csv", report)
    return report


def _checkpointing(cfg: ExperimentConfig, out: Path, on_epoch):
    """Wrap ``on_epoch`` so the state is saved every ``checkpoint_every`` epochs."""
    every = cfg.checkpoint_every

    def hook(state, rec):
        if every > 0 and state.epoch % every == 0:
            folder = out / "checkpoints"
            folder.mkdir(exist_ok=True)
            save_state(folder / f"stage{state.stage}_epoch{state.epoch:03d}.npz", state)
        if on_epoch:
            on_epoch(state, rec)
    return hook


def run_stage1(cfg: ExperimentConfig, overwrite: bool = False, prep: Prepared | None = None,
               on_epoch=None) -> Path:
    """Train on the weak labels only; artefacts go to the run directory."""
    final = Path(cfg.output_dir)
    prep = prep or prepare_training(cfg)
    with staged_dir(final, overwrite) as out:
        (out / "config.txt").write_text(cfg.to_text(_timestamp()))
        weak = sample_weak_labels(prep.sub_labels, cfg.labels_per_class, cfg.cap_fraction,
                                  cfg.label_seed, n_classes=len(prep.class_names))
        write_weak_labels(out / "weak_labels.txt", weak)
        t0 = time.perf_counter()
        state = train_incomplete(prep.data, weak, cfg.trainer(),
                                 on_epoch=_checkpointing(cfg, out, on_epoch))
        logger.info("stage 1 finished in %.1fs", time.perf_counter() - t0)
        write_epoch_log(out / "epochs_stage1.csv", state.history)
        save_state(out / "state_stage1.npz", state)
        save_model(out / "model_stage1.npz", _model(cfg, prep, state.params, "stage1"))
    return final


def run_stage2(cfg: ExperimentConfig, strategy: str | None = None,
               prep: Prepared | None = None, on_epoch=None, on_regenerate=None,
               test=None) -> Path:
    """Continue a finished stage 1 with ``strategy``; ``baseline`` only evaluates it."""
    strategy = strategy or cfg.strategy
    run_dir = Path(cfg.output_dir)
    if not (run_dir / "state_stage1.npz").is_file():
        raise FileNotFoundError(f"no stage 1 state in {run_dir}; run 'train' first")
    prep = prep or prepare_training(cfg)
    weak = read_weak_labels(run_dir / "weak_labels.txt")
    state = load_state(run_dir / "state_stage1.npz")
    if state.params.layer_sizes[0] != prep.data.features.shape[1]:
        raise ValueError("stage 1 state does not match the configured features")
    tcfg = cfg.trainer(strategy)
    with staged_dir(run_dir / strategy, overwrite=True) as out:
        (out / "config.txt").write_text(cfg.replace(strategy=strategy).to_text(_timestamp()))
        if strategy != "baseline":
            snapshots = out / "pseudo_labels.csv"

            def record(previous, new):
                write_pseudo_snapshot(snapshots, new, append=snapshots.exists())
                if on_regenerate:
                    on_regenerate(previous, new)

            t0 = time.perf_counter()
            state = train_pseudo_assisted(state, prep.data, weak, tcfg,
                                          on_epoch=_checkpointing(cfg, out, on_epoch),
                                          on_regenerate=record)
            logger.info("stage 2 (%s) finished in %.1fs", strategy, time.perf_counter() - t0)
        write_epoch_log(out / "epochs.csv", state.history)
        model = _model(cfg, prep, state.params, strategy)
        save_model(out / "model.npz", model)
        evaluate_model(model, cfg, out, prep.class_names, test)
    return run_dir / strategy


def run_experiment(cfg: ExperimentConfig, overwrite: bool = False,
                   strategies: tuple | None = None, on_regenerate=None) -> dict:
    """Full pipeline; returns the metrics report of each strategy."""
    strategies = strategies or (cfg.strategy,)
    with stage("loading training data"):
        prep = prepare_training(cfg)
    with stage("loading test data"):
        if cfg.synthetic or cfg.test_file:
            test = load_split(cfg, "test")
        else:
            test = (prep.cloud, prep.labels, prep.class_names)
    with stage("stage 1"):
        run_stage1(cfg, overwrite, prep)
    reports = {}
    for strategy in strategies:
        with stage(f"stage 2 ({strategy})"):
            out = run_stage2(cfg, strategy, prep, on_regenerate=on_regenerate, test=test)
        reports[strategy] = json.loads((out / "metrics.json").read_text())
    return reports


def predict_file(model_path, in_path, out_path, columns: str = "x=0,y=1,z=2,intensity=3"):
    model = load_model(model_path)
    mapping = ColumnMapping.parse(columns)
    cloud, _ = read_pointcloud_text(in_path, mapping)
    voxel = float(model.meta.get("voxel_size", 0.4))
    pred = predict_cloud(model, cloud, voxel)
    write_predictions(out_path, cloud, pred)
    return pred


# --------------------------------------------------------------------------
# aggregation across runs
# --------------------------------------------------------------------------

def find_runs(root) -> list:
    """Every directory under ``root`` holding a finished strategy run."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob("metrics.json")
                  if not any(part.endswith(".partial") for part in p.parts))


def summarize_runs(root, out_dir=None) -> Path:
    """Write summary tables (and a chart when matplotlib is present)."""
    root = Path(root)
    runs = find_runs(root)
    if not runs:
        raise FileNotFoundError(f"no finished runs under {root}")
    out_dir = Path(out_dir) if out_dir else root / "summary"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, curves = [], {}
    for run in runs:
        name = str(run.relative_to(root)) if run != root else run.name
        rep = json.loads((run / "metrics.json").read_text())
        rows.append([name, rep["overall_accuracy"], rep["macro_f1"]])
        log = run / "epochs.csv"
        if log.is_file():
            with open(log) as fh:
                curves[name] = [r for r in csv.DictReader(fh)]
    with open(out_dir / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "overall_accuracy", "macro_f1"])
        for name, oa, mf1 in rows:
            w.writerow([name, repr(oa), repr(mf1)])
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "stage", "epoch", "train_OA", "pseudo_count", "generation"])
        for name, recs in curves.items():
            for r in recs:
                w.writerow([name, r["stage"], r["epoch"], r["train_OA"], r["pseudo_count"],
                            r["generation"]])
    (out_dir / "README.txt").write_text(SCALE_NOTE + "\n")
    _plot_curves(curves, out_dir / "train_oa.png")
    return out_dir


def _plot_curves(curves: dict, path: Path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping %s", path.name)
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, recs in curves.items():
        x = np.arange(1, len(recs) + 1)
        y = [float(r["train_OA"]) if r["train_OA"] else np.nan for r in recs]
        ax.plot(x, y, label=name)
    ax.set_xlabel("epoch (stage 1 then stage 2)")
    ax.set_ylabel("training OA")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
