"""Procedural indoor rooms: a desk-scale stand-in for scanned scenes.

Class 0 is the floor, class 1 the walls, and every further class is a
furniture-like primitive (box, cylinder, sphere, table) dropped at a random
spot. Points are sampled on surfaces only, like a depth scan.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass

import numpy as np

from .pointcloud import PointCloud

SHAPES = ("box", "cylinder", "sphere", "table")


@dataclass(frozen=True)
class SceneParams:
    room_size: float = 1.6
    classes: int = 6
    points_per_class: int = 500
    noise: float = 0.005
    color_noise: float = 0.12

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("synthetic scenes need at least 2 classes")
        if self.room_size <= 0 or self.points_per_class < 1 or self.noise < 0 or self.color_noise < 0:
            raise ValueError("degenerate scene parameters")

    def to_dict(self) -> dict:
        return asdict(self)


def class_palette(classes: int) -> np.ndarray:
    """Evenly spaced hues at moderate saturation."""
    return np.array([colorsys.hsv_to_rgb(c / classes, 0.45, 0.75) for c in range(classes)])


def _box_surface(rng, n, lo, hi):
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    axis = face % 3
    at_hi = face >= 3
    pts[np.arange(n), axis] = np.where(at_hi, hi[axis], lo[axis])
    return pts


def _cylinder_surface(rng, n, center, radius, height):
    side = height * 2 * np.pi * radius
    top = np.pi * radius**2
    on_top = rng.random(n) < top / (side + top)
    theta = rng.random(n) * 2 * np.pi
    r = np.where(on_top, radius * np.sqrt(rng.random(n)), radius)
    z = np.where(on_top, height, rng.random(n) * height)
    return np.stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta), z], axis=1)


def _sphere_surface(rng, n, center, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = center + radius * v
    return pts


def _table_surface(rng, n, center, half, height):
    n_top = n * 3 // 4
    top = _box_surface(rng, n_top, np.array([center[0] - half, center[1] - half, height - 0.03]),
                       np.array([center[0] + half, center[1] + half, height]))
    legs = []
    corners = [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    per_leg = np.bincount(rng.integers(0, 4, n - n_top), minlength=4)
    for (sx, sy), m in zip(corners, per_leg):
        cx, cy = center[0] + sx * (half - 0.03), center[1] + sy * (half - 0.03)
        legs.append(_box_surface(rng, m, np.array([cx - 0.02, cy - 0.02, 0.0]), np.array([cx + 0.02, cy + 0.02, height - 0.03])))
    return np.concatenate([top] + legs)


def _object_points(rng, shape, n, room):
    margin = 0.25 * room
    center = np.array([rng.uniform(margin, room - margin), rng.uniform(margin, room - margin), 0.0])
    scale = room / 1.6
    if shape == "box":
        half = rng.uniform(0.08, 0.2, 3) * scale
        lo = np.array([center[0] - half[0], center[1] - half[1], 0.0])
        return _box_surface(rng, n, lo, lo + 2 * half)
    if shape == "cylinder":
        return _cylinder_surface(rng, n, center, rng.uniform(0.06, 0.15) * scale, rng.uniform(0.2, 0.5) * scale)
    if shape == "sphere":
        radius = rng.uniform(0.08, 0.18) * scale
        center[2] = radius
        return _sphere_surface(rng, n, center, radius)
    return _table_surface(rng, n, center, rng.uniform(0.15, 0.25) * scale, rng.uniform(0.25, 0.4) * scale)


def synth_scene(seed: int, params: SceneParams | None = None, **overrides) -> PointCloud:
    """Deterministic room with exactly ``points_per_class`` points per class."""
    params = params or SceneParams()
    if overrides:
        params = SceneParams(**{**params.to_dict(), **overrides})
    rng = np.random.default_rng(seed)
    room, n = params.room_size, params.points_per_class
    chunks = []
    # floor
    floor = np.zeros((n, 3))
    floor[:, :2] = rng.random((n, 2)) * room
    chunks.append(floor)
    # two walls meeting in the corner at the origin
    wall = rng.random((n, 3)) * np.array([room, room, 0.6 * room])
    on_x = rng.random(n) < 0.5
    wall[on_x, 0] = 0.0
    wall[~on_x, 1] = 0.0
    chunks.append(wall)
    for c in range(2, params.classes):
        chunks.append(_object_points(rng, SHAPES[(c - 2) % len(SHAPES)], n, room))
    positions = np.concatenate(chunks)
    labels = np.repeat(np.arange(params.classes), n)
    if params.noise > 0:
        positions = positions + rng.normal(0.0, params.noise, positions.shape)
    palette = class_palette(params.classes)
    colors = palette[labels] + rng.normal(0.0, params.color_noise, positions.shape)
    return PointCloud(positions, colors, labels)
