"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment. Lists are comma separated and
``none`` clears an optional value. ``python -m weakseg schema`` prints every
key with its default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .synthetic import SceneRecipe
from .trainer import TrainerConfig, normalize_strategy

STRATEGIES = ("baseline", "pl", "pl-all")


def _opt(default, kind: str, help: str):
    if isinstance(default, (list, tuple)):
        return field(default=tuple(default), metadata={"kind": kind, "help": help})
    return field(default=default, metadata={"kind": kind, "help": help})


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    train_file: str = _opt("", "str", "training point file; empty means a synthetic scene")
    test_file: str = _opt("", "str", "test point file; empty means evaluate on the training file")
    columns: str = _opt("x=0,y=1,z=2,intensity=3,label=4", "str",
                        "column mapping of the point files")
    class_names: tuple = _opt((), "strs", "class names by id; empty uses the scene classes")
    train_scene_seed: int = _opt(1000, "int", "seed of the synthetic training scene")
    test_scene_seed: int = _opt(5000, "int", "seed of the synthetic test scene")
    scene_extent: tuple = _opt((64.0, 64.0), "floats", "synthetic scene size in metres (x, y)")
    scene_classes: tuple = _opt(("ground", "roof", "facade", "tree"), "strs",
                                "synthetic scene classes")
    scene_density: float = _opt(4.0, "float", "synthetic points per square metre")
    scene_n_buildings: int = _opt(6, "int", "synthetic building count")
    scene_n_trees: int = _opt(25, "int", "synthetic tree count")
    scene_n_shrubs: int = _opt(15, "int", "synthetic shrub count")
    scene_n_fences: int = _opt(4, "int", "synthetic fence count")
    scene_n_cars: int = _opt(6, "int", "synthetic car count")
    # pipeline
    voxel_size: float = _opt(0.4, "float", "grid subsampling cell size")
    labels_per_class: int = _opt(15, "int", "weak labels requested per class")
    cap_fraction: float = _opt(0.1, "float", "largest labeled fraction of any class")
    label_seed: int = _opt(0, "int", "seed of the weak label draw")
    feature_k: int = _opt(24, "int", "neighbours kept per feature scale")
    feature_radii: tuple = _opt((1.0, 2.0, 4.0, 8.0, 12.0), "floats", "feature scale radii")
    hidden: tuple = _opt((64, 64), "ints", "hidden layer widths")
    strategy: str = _opt("pl", "str", "baseline, pl or pl-all")
    # trainer
    epochs_stage1: int = _opt(100, "int", "stage 1 epochs")
    epochs_stage2: int = _opt(100, "int", "stage 2 epoch budget")
    alpha: float = _opt(1.0, "float", "weight of the pseudo-label loss")
    convergence_threshold: float = _opt(0.99, "float",
                                        "every batch accuracy must exceed this to regenerate")
    block_radius: float = _opt(30.0, "float", "training block radius")
    batch_blocks: int = _opt(1, "int", "blocks per batch")
    steps_per_epoch: Optional[int] = _opt(None, "int?", "batches per epoch; none derives it")
    learning_rate: float = _opt(0.01, "float", "initial learning rate")
    momentum: float = _opt(0.9, "float", "SGD momentum")
    lr_decay: float = _opt(0.95, "float", "per-epoch learning rate factor")
    seed: int = _opt(0, "int", "trainer seed")
    threshold_scope: str = _opt("all", "str", "points averaged into the threshold: all or unlabeled")
    fixed_threshold: Optional[float] = _opt(None, "float?", "fixed confidence threshold")
    carry_velocity: bool = _opt(True, "bool", "keep the SGD velocity across stages")
    # output
    output_dir: str = _opt("runs/default", "str", "run directory")
    checkpoint_every: int = _opt(0, "int", "also save the trainer state every K epochs; 0 disables")

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if self.labels_per_class < 0:
            raise ValueError("labels_per_class must be non-negative")
        self.trainer()  # validates the trainer keys

    # -- derived objects ---------------------------------------------------

    def trainer(self, strategy: str | None = None) -> TrainerConfig:
        strategy = strategy or self.strategy
        return TrainerConfig(
            epochs_stage1=self.epochs_stage1, epochs_stage2=self.epochs_stage2,
            alpha=self.alpha, convergence_threshold=self.convergence_threshold,
            block_radius=self.block_radius, batch_blocks=self.batch_blocks,
            steps_per_epoch=self.steps_per_epoch, learning_rate=self.learning_rate,
            momentum=self.momentum, lr_decay=self.lr_decay, seed=self.seed,
            update_strategy=normalize_strategy("pl" if strategy == "baseline" else strategy),
            threshold_scope=self.threshold_scope, fixed_threshold=self.fixed_threshold,
            carry_velocity=self.carry_velocity, hidden=self.hidden)

    def scene(self, seed: int) -> SceneRecipe:
        kwargs = {f.name[len("scene_"):]: getattr(self, f.name)
                  for f in dataclasses.fields(self) if f.name.startswith("scene_")}
        return SceneRecipe(seed=seed, **kwargs)

    @property
    def synthetic(self) -> bool:
        return not self.train_file

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    # -- text form ----------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = parse_value(raw, fields[key].metadata["kind"])
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def to_text(self, header: str | None = None) -> str:
        lines = [f"# {header}"] if header else []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def parse_value(raw: str, kind: str):
    if kind.endswith("?"):
        if raw.lower() in ("none", ""):
            return None
        kind = kind[:-1]
    if kind == "str":
        return raw
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if kind == "strs":
        return tuple(items)
    if kind == "floats":
        return tuple(float(s) for s in items)
    if kind == "ints":
        return tuple(int(s) for s in items)
    raise ValueError(f"unknown kind {kind}")


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def schema_text() -> str:
    rows = []
    for f in dataclasses.fields(ExperimentConfig):
        rows.append(f"{f.name:<22} {f.metadata['kind']:<7} "
                    f"{format_value(f.default):<34} {f.metadata['help']}")
    return "\n".join(rows) + "\n"
