"""Procedural ALS-like scenes with per-point ground truth.

Classes are built from simple primitives: an undulating ground plane,
buildings (flat roof + walls), ellipsoid tree crowns and shrubs, thin
fences and box-shaped cars. Only the classes listed in a recipe are
generated; class ids follow the order of ``SceneRecipe.classes``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

KNOWN_CLASSES = ("ground", "roof", "facade", "tree", "shrub", "fence", "car")

# mean normalized intensity per class
DEFAULT_INTENSITY = {
    "ground": 0.40, "roof": 0.55, "facade": 0.45, "tree": 0.30,
    "shrub": 0.35, "fence": 0.50, "car": 0.65,
}


@dataclass
class SceneRecipe:
    extent: tuple = (80.0, 80.0)
    classes: tuple = ("ground", "roof", "facade", "tree")
    density: float = 4.0  # points per m^2 on horizontal surfaces
    n_buildings: int = 6
    n_trees: int = 25
    n_shrubs: int = 15
    n_fences: int = 4
    n_cars: int = 6
    facade_density_ratio: float = 0.35
    building_size: tuple = (8.0, 18.0)
    building_height: tuple = (4.0, 14.0)
    tree_radius: tuple = (2.0, 4.0)
    trunk_height: tuple = (2.0, 5.0)
    ground_amplitude: float = 0.6
    ground_wavelength: float = 45.0
    intensity_noise: float = 0.12
    position_noise: float = 0.05
    intensity: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITY))
    seed: int = 0

    def __post_init__(self):
        self.extent = tuple(float(e) for e in self.extent)
        self.classes = tuple(self.classes)
        for name in ("building_size", "building_height", "tree_radius", "trunk_height"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be an increasing positive range")
            setattr(self, name, (lo, hi))
        if len(self.extent) != 2 or min(self.extent) <= 0:
            raise ValueError(f"degenerate scene extent {self.extent}")
        if not self.density > 0:
            raise ValueError("density must be positive")
        unknown = [c for c in self.classes if c not in KNOWN_CLASSES]
        if unknown:
            raise ValueError(f"unknown classes {unknown}; choose from {KNOWN_CLASSES}")
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise ValueError("classes must be a non-empty list without repeats")


def _ground_height(recipe: SceneRecipe, xy: np.ndarray) -> np.ndarray:
    k = 2 * math.pi / recipe.ground_wavelength
    return recipe.ground_amplitude * np.sin(k * xy[:, 0]) * np.cos(0.7 * k * xy[:, 1])


def _poisson_count(rng, area: float, density: float) -> int:
    return int(rng.poisson(max(area, 0.0) * density))


class _Placer:
    """Rejection sampling of non-overlapping footprints (axis-aligned discs)."""

    def __init__(self, extent, rng):
        self.extent = extent
        self.rng = rng
        self.taken = []  # (cx, cy, radius)

    def place(self, radius: float, margin: float = 1.0, attempts: int = 200):
        ex, ey = self.extent
        for _ in range(attempts):
            cx = self.rng.uniform(radius, max(radius, ex - radius))
            cy = self.rng.uniform(radius, max(radius, ey - radius))
            if all(math.hypot(cx - x, cy - y) > radius + r + margin for x, y, r in self.taken):
                self.taken.append((cx, cy, radius))
                return cx, cy
        return None


def generate_synthetic_scene(recipe: SceneRecipe):
    """Return ``(cloud, labels, class_names)``; deterministic for a given recipe."""
    rng = np.random.default_rng(recipe.seed)
    ex, ey = recipe.extent
    dens = recipe.density
    cls_id = {name: i for i, name in enumerate(recipe.classes)}
    parts = []  # (positions, class name)
    placer = _Placer(recipe.extent, rng)
    footprints = []  # building rectangles (x0, y0, x1, y1) hiding ground

    def ground_z(x, y):
        return float(_ground_height(recipe, np.array([[x, y]]))[0])

    want = set(recipe.classes)
    if want & {"roof", "facade"}:
        for _ in range(max(recipe.n_buildings, 1)):
            w, l = rng.uniform(*recipe.building_size, size=2)
            spot = placer.place(0.5 * math.hypot(w, l), margin=3.0)
            if spot is None:
                continue
            cx, cy = spot
            h = rng.uniform(*recipe.building_height)
            x0, x1, y0, y1 = cx - w / 2, cx + w / 2, cy - l / 2, cy + l / 2
            base = ground_z(cx, cy)
            footprints.append((x0, y0, x1, y1))
            if "roof" in want:
                n = _poisson_count(rng, w * l, dens)
                xy = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
                # mild pitch so roofs are planar but not all horizontal
                pitch = rng.uniform(-0.25, 0.25)
                z = base + h + pitch * (xy[:, 0] - cx)
                parts.append((np.column_stack([xy, z]), "roof"))
            if "facade" in want:
                wall_density = dens * recipe.facade_density_ratio
                for (ax, ay, bx, by) in ((x0, y0, x1, y0), (x1, y0, x1, y1),
                                         (x1, y1, x0, y1), (x0, y1, x0, y0)):
                    length = math.hypot(bx - ax, by - ay)
                    n = _poisson_count(rng, length * h, wall_density)
                    t = rng.uniform(0, 1, n)
                    z = base + rng.uniform(0.2, h, n)
                    parts.append((np.column_stack([ax + t * (bx - ax), ay + t * (by - ay), z]),
                                  "facade"))

    def ellipsoid_points(cx, cy, cz, rx, ry, rz, n):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # canopy returns concentrate near the hull
        s = rng.uniform(0.6, 1.0, n) ** 0.5
        return np.column_stack([cx + rx * s * d[:, 0], cy + ry * s * d[:, 1], cz + rz * s * d[:, 2]])

    if "fence" in want:
        for _ in range(max(recipe.n_fences, 1)):
            length = rng.uniform(8, 20)
            spot = placer.place(length / 2, margin=0.5)
            if spot is None:
                continue
            cx, cy = spot
            ang = rng.uniform(0, math.pi)
            h = rng.uniform(1.0, 2.0)
            n = _poisson_count(rng, length * h, dens)
            t = rng.uniform(-0.5, 0.5, n) * length
            x, y = cx + t * math.cos(ang), cy + t * math.sin(ang)
            z = _ground_height(recipe, np.column_stack([x, y])) + rng.uniform(0.1, h, n)
            parts.append((np.column_stack([x, y, z]), "fence"))
    if "car" in want:
        for _ in range(max(recipe.n_cars, 1)):
            spot = placer.place(2.5, margin=0.5)
            if spot is None:
                continue
            cx, cy = spot
            ang = rng.uniform(0, math.pi)
            n = _poisson_count(rng, 4.5 * 1.8, dens * 1.5)
            u = rng.uniform(-2.25, 2.25, n)
            v = rng.uniform(-0.9, 0.9, n)
            # rounded body: highest in the middle
            z = ground_z(cx, cy) + 0.5 + 1.0 * np.sqrt(np.clip(1 - (u / 2.4) ** 2, 0, 1))
            x = cx + u * math.cos(ang) - v * math.sin(ang)
            y = cy + u * math.sin(ang) + v * math.cos(ang)
            parts.append((np.column_stack([x, y, z]), "car"))
    if "tree" in want:
        for _ in range(max(recipe.n_trees, 1)):
            r = rng.uniform(*recipe.tree_radius)
            spot = placer.place(r, margin=0.5)
            if spot is None:
                continue
            cx, cy = spot
            base = ground_z(cx, cy)
            trunk = rng.uniform(*recipe.trunk_height)
            rz = r * rng.uniform(0.8, 1.3)
            n = _poisson_count(rng, math.pi * r * r, 1.5 * dens)
            pts = ellipsoid_points(cx, cy, base + trunk + rz, r, r, rz, n)
            parts.append((pts, "tree"))
    if "shrub" in want:
        for _ in range(max(recipe.n_shrubs, 1)):
            r = rng.uniform(0.7, 1.5)
            spot = placer.place(r, margin=0.3)
            if spot is None:
                continue
            cx, cy = spot
            rz = r * rng.uniform(0.5, 0.9)
            n = _poisson_count(rng, math.pi * r * r, 1.5 * dens)
            pts = ellipsoid_points(cx, cy, ground_z(cx, cy) + rz, r, r, rz, n)
            parts.append((pts, "shrub"))
    if "ground" in want:
        n = _poisson_count(rng, ex * ey, dens)
        xy = np.column_stack([rng.uniform(0, ex, n), rng.uniform(0, ey, n)])
        hidden = np.zeros(n, dtype=bool)
        for x0, y0, x1, y1 in footprints:
            hidden |= (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
        xy = xy[~hidden]
        parts.append((np.column_stack([xy, _ground_height(recipe, xy)]), "ground"))

    present = {name for pts, name in parts if len(pts)}
    missing = [c for c in recipe.classes if c not in present]
    if missing:
        raise ValueError(f"scene has no points for classes {missing}; enlarge the extent")

    positions = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([np.full(len(p), cls_id[name], dtype=np.int64) for p, name in parts])
    positions = positions + rng.normal(scale=recipe.position_noise, size=positions.shape)
    means = np.array([recipe.intensity.get(recipe.classes[c], 0.5) for c in labels])
    intensity = np.clip(means + rng.normal(scale=recipe.intensity_noise, size=len(labels)), 0, 1)
    return PointCloud(positions, intensity[:, None]), labels, list(recipe.classes)
