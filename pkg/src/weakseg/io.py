"""Plain-text point files.

Rows are whitespace (or ``delimiter``) separated numbers, one point per
line; lines starting with ``#`` are comments. Floats are written with 17
significant digits so a write/read cycle is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import UNLABELED, PointCloud


@dataclass(frozen=True)
class ColumnMapping:
    x: int = 0
    y: int = 1
    z: int = 2
    intensity: Optional[int] = 3
    colors: tuple = ()
    label: Optional[int] = 4
    delimiter: Optional[str] = None
    skip_header: int = 0
    class_map: dict = field(default_factory=dict)  # raw label -> class id

    def __post_init__(self):
        cols = [self.x, self.y, self.z, *self.attribute_columns]
        if self.label is not None:
            cols.append(self.label)
        if any(c is None or c < 0 for c in cols):
            raise ValueError("column indices must be non-negative")
        if len(set(cols)) != len(cols):
            raise ValueError(f"columns must be distinct, got {cols}")

    @property
    def attribute_columns(self) -> list:
        cols = [] if self.intensity is None else [self.intensity]
        return cols + list(self.colors)

    @classmethod
    def parse(cls, spec: str) -> "ColumnMapping":
        """Build from ``"x=0,y=1,z=2,intensity=3,label=4"``-style text.

        ``colors=5:6:7`` lists colour columns, ``intensity=none`` or
        ``label=none`` drops a column, ``skip=1`` skips header lines,
        ``delimiter=,`` sets the separator and ``map=1:0:2:1`` remaps raw
        labels (raw:class pairs).
        """
        kwargs = {"intensity": None, "label": None}
        for item in filter(None, (s.strip() for s in spec.split(";" if ";" in spec else ","))):
            if "=" not in item:
                raise ValueError(f"bad column spec item {item!r}")
            key, value = (s.strip() for s in item.split("=", 1))
            if key in ("x", "y", "z", "intensity", "label"):
                kwargs[key] = None if value.lower() == "none" else int(value)
            elif key == "colors":
                kwargs["colors"] = tuple(int(v) for v in value.split(":") if v)
            elif key == "skip":
                kwargs["skip_header"] = int(value)
            elif key == "delimiter":
                kwargs["delimiter"] = {"tab": "\t", "comma": ",", "space": None}.get(value, value)
            elif key == "map":
                vals = [int(v) for v in value.split(":")]
                kwargs["class_map"] = dict(zip(vals[0::2], vals[1::2]))
            else:
                raise ValueError(f"unknown column key {key!r}")
        return cls(**kwargs)


XYZ_LABEL = ColumnMapping(intensity=None, label=3)


def read_pointcloud_text(path, mapping: ColumnMapping = ColumnMapping(),
                         n_classes: int | None = None):
    """Read ``(cloud, labels)``; labels are all UNLABELED without a label column."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such point file: {path}")
    need = max([mapping.x, mapping.y, mapping.z, *mapping.attribute_columns,
                -1 if mapping.label is None else mapping.label]) + 1
    rows, raw_labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= mapping.skip_header:
                continue
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(mapping.delimiter)
            if len(parts) < need:
                raise ValueError(f"{path}:{lineno}: expected at least {need} columns, "
                                 f"found {len(parts)}")
            try:
                xyz = [float(parts[mapping.x]), float(parts[mapping.y]), float(parts[mapping.z])]
                attrs = [float(parts[c]) for c in mapping.attribute_columns]
                if mapping.label is not None:
                    raw = float(parts[mapping.label])
                    if raw != int(raw):
                        raise ValueError(f"non-integer label {parts[mapping.label]!r}")
                    raw_labels.append(int(raw))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(xyz)):
                raise ValueError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(xyz + attrs)
    if not rows:
        raise ValueError(f"{path}: no points")
    data = np.array(rows, dtype=np.float64)
    cloud = PointCloud(data[:, :3], data[:, 3:])
    if mapping.label is None:
        return cloud, np.full(len(rows), UNLABELED, dtype=np.int64)
    labels = np.array(raw_labels, dtype=np.int64)
    if mapping.class_map:
        lookup = dict(mapping.class_map)
        lookup.setdefault(UNLABELED, UNLABELED)
        unknown = sorted(set(labels.tolist()) - set(lookup))
        if unknown:
            raise ValueError(f"{path}: unknown class ids {unknown}")
        labels = np.array([lookup[v] for v in labels.tolist()], dtype=np.int64)
    bad = (labels < 0) & (labels != UNLABELED)
    if n_classes is not None:
        bad |= labels >= n_classes
    if bad.any():
        raise ValueError(f"{path}: unknown class id {labels[bad][0]}")
    return cloud, labels


def _write_rows(path, header: str, columns):
    path = Path(path)
    parent = path.parent
    if not parent.is_dir():
        raise OSError(f"cannot write {path}: directory does not exist")
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        if columns[0].shape[0]:
            fmt = []
            for col in columns:
                fmt.append("%d" if np.issubdtype(col.dtype, np.integer) else "%.17g")
            stacked = np.column_stack([c.astype(object) for c in columns])
            np.savetxt(fh, stacked, fmt=" ".join(fmt))


def write_pointcloud_text(path, cloud: PointCloud, labels=None):
    """``x y z attr... [label]`` rows, readable with the default mapping when A == 1."""
    cols = [cloud.positions[:, i] for i in range(3)]
    cols += [cloud.attributes[:, j] for j in range(cloud.n_attributes)]
    names = ["x", "y", "z"] + [f"attr{j}" for j in range(cloud.n_attributes)]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (cloud.n_points,):
            raise ValueError("label count does not match the cloud")
        cols.append(labels)
        names.append("label")
    _write_rows(path, " ".join(names), cols)


def write_predictions(path, cloud: PointCloud, pred):
    pred = np.asarray(pred, dtype=np.int64)
    if pred.shape != (cloud.n_points,):
        raise ValueError("prediction count does not match the cloud")
    if np.any(pred < 0):
        raise ValueError("predictions contain unlabeled entries")
    _write_rows(path, "x y z class_id", [cloud.positions[:, i] for i in range(3)] + [pred])


def write_error_map(path, cloud: PointCloud, flags):
    flags = np.asarray(flags, dtype=np.int64)
    if flags.shape != (cloud.n_points,):
        raise ValueError("flag count does not match the cloud")
    _write_rows(path, "x y z flag (1 correct, 0 wrong, -1 unlabeled)",
                [cloud.positions[:, i] for i in range(3)] + [flags])


def read_predictions(path):
    return read_pointcloud_text(path, XYZ_LABEL)
