"""Command line entry point: ``weakseg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, schema_text
from .evaluation import accumulate_confusion, metrics_report, write_report_csv, write_report_json
from .experiment import (
    StageError, predict_file, run_experiment, run_stage1, run_stage2, summarize_runs,
)
from .geometry import UNLABELED, grid_subsample
from .io import ColumnMapping, read_pointcloud_text, read_predictions, write_pointcloud_text
from .synthetic import generate_synthetic_scene
from .weak_labels import sample_weak_labels, write_weak_labels

logger = logging.getLogger("weakseg")

DEFAULT_COLUMNS = "x=0,y=1,z=2,intensity=3,label=4"


def load_config(args) -> ExperimentConfig:
    text = Path(args.config).read_text() if args.config else ""
    text += "\n" + "\n".join(args.set or [])
    return ExperimentConfig.from_text(text, args.config or "<command line>")


def cmd_schema(args):
    sys.stdout.write(schema_text())


def cmd_gen_scene(args):
    cfg = load_config(args)
    cloud, labels, names = generate_synthetic_scene(cfg.scene(args.seed))
    write_pointcloud_text(args.out, cloud, labels)
    counts = np.bincount(labels, minlength=len(names))
    print(f"{cloud.n_points} points: " + ", ".join(f"{n}={c}" for n, c in zip(names, counts)))


def cmd_subsample(args):
    cloud, labels = read_pointcloud_text(args.input, ColumnMapping.parse(args.columns))
    res = grid_subsample(cloud, labels, args.voxel)
    has_labels = "label=" in args.columns and "label=none" not in args.columns
    write_pointcloud_text(args.out, res.sub_cloud, res.sub_labels if has_labels else None)
    print(f"{cloud.n_points} -> {res.sub_cloud.n_points} points (voxel {args.voxel})")


def cmd_sample_labels(args):
    _, labels = read_pointcloud_text(args.input, ColumnMapping.parse(args.columns))
    if np.all(labels == UNLABELED):
        raise ValueError(f"{args.input} has no labels to sample from")
    weak = sample_weak_labels(labels, args.per_class, args.cap, args.seed)
    write_weak_labels(args.out, weak)
    print(f"{len(weak)} weak labels: {weak.per_class_selected}")


def cmd_train(args):
    cfg = load_config(args)
    out = run_stage1(cfg, overwrite=args.force)
    print(f"stage 1 written to {out}")


def cmd_pl_train(args):
    cfg = load_config(args)
    out = run_stage2(cfg, args.strategy)
    print(f"stage 2 ({args.strategy}) written to {out}")


def cmd_run(args):
    cfg = load_config(args)
    strategies = tuple(args.strategies.split(",")) if args.strategies else None
    reports = run_experiment(cfg, overwrite=args.force, strategies=strategies)
    for name, rep in reports.items():
        print(f"{name}: OA={rep['overall_accuracy']:.4f} macro-F1={rep['macro_f1']:.4f}")


def cmd_predict(args):
    pred = predict_file(args.model, args.input, args.out, args.columns)
    print(f"{len(pred)} predictions written to {args.out}")


def cmd_evaluate(args):
    pred_cloud, pred = read_predictions(args.pred)
    truth_cloud, truth = read_pointcloud_text(args.truth, ColumnMapping.parse(args.columns))
    if pred_cloud.n_points != truth_cloud.n_points:
        raise ValueError(f"{args.pred} has {pred_cloud.n_points} points, "
                         f"{args.truth} has {truth_cloud.n_points}")
    if not np.array_equal(pred_cloud.positions, truth_cloud.positions):
        raise ValueError("prediction and ground-truth coordinates differ")
    names = args.class_names.split(",") if args.class_names else None
    n = len(names) if names else int(max(pred.max(), truth.max())) + 1
    names = names or [f"class_{c}" for c in range(n)]
    report = metrics_report(accumulate_confusion(pred, truth, n), names)
    report_path = Path(args.report)
    write_report_json(report_path, report)
    write_report_csv(report_path.with_suffix(".csv"), report)
    print(f"OA={report['overall_accuracy']:.4f} macro-F1={report['macro_f1']:.4f}")


def cmd_report(args):
    out = summarize_runs(args.run_dir, args.out)
    print(f"summary written to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakseg",
                                description="Weakly supervised point cloud segmentation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("schema", help="print the config keys and defaults")
    sp.set_defaults(func=cmd_schema)

    sp = sub.add_parser("gen-scene", help="write a synthetic labeled scene")
    sp.add_argument("--recipe", dest="config", help="config file with scene_* keys")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_scene)

    sp = sub.add_parser("subsample", help="grid subsample a point file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--voxel", type=float, default=0.4)
    sp.add_argument("--columns", default=DEFAULT_COLUMNS)
    sp.set_defaults(func=cmd_subsample)

    sp = sub.add_parser("sample-labels", help="draw weak labels from a labeled file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--cap", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--columns", default=DEFAULT_COLUMNS)
    sp.set_defaults(func=cmd_sample_labels)

    sp = sub.add_parser("train", help="stage 1: train on weak labels")
    with_config(sp)
    sp.add_argument("--force", action="store_true", help="replace an existing run directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("pl-train", help="stage 2: pseudo-label assisted training")
    with_config(sp)
    sp.add_argument("--strategy", choices=("pl", "pl-all", "baseline"), default="pl")
    sp.set_defaults(func=cmd_pl_train)

    sp = sub.add_parser("run", help="full pipeline from a config file")
    with_config(sp)
    sp.add_argument("--strategies", help="comma separated, e.g. baseline,pl,pl-all")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("predict", help="label a point file with a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--columns", default="x=0,y=1,z=2,intensity=3")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--report", required=True, help="JSON path; a CSV is written beside it")
    sp.add_argument("--columns", default=DEFAULT_COLUMNS)
    sp.add_argument("--class-names", help="comma separated names by class id")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="summarize finished runs")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--out", help="summary directory (default <run-dir>/summary)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, StageError) as exc:
        print(f"weakseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
