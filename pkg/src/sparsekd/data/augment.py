from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..sparse import build_coordinate_map
from .pointcloud import PointCloud, VoxelizedScene


@dataclass(frozen=True)
class AugmentFlags:
    rotate_z: bool = False
    flip_xy: bool = False
    jitter: bool = False
    color_jitter: bool = False
    jitter_sigma: float = 0.005
    color_sigma: float = 0.05

    @property
    def any(self) -> bool:
        return self.rotate_z or self.flip_xy or self.jitter or self.color_jitter

    def to_dict(self) -> dict:
        return asdict(self)


def augment(pc: PointCloud, seed, flags: AugmentFlags, angle: float | None = None) -> PointCloud:
    """Seeded label-preserving transforms applied in a fixed order.

    ``seed`` may be an int or a ``numpy.random.Generator``; ``angle`` pins
    the z rotation instead of drawing it uniformly from [0, 2*pi).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos = pc.positions
    colors = pc.colors
    if flags.rotate_z:
        theta = rng.uniform(0.0, 2 * np.pi) if angle is None else angle
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pos = pos @ rot.T
    if flags.flip_xy:
        signs = np.where(rng.random(2) < 0.5, -1.0, 1.0)
        pos = pos * np.array([signs[0], signs[1], 1.0])
    if flags.jitter:
        pos = pos + rng.normal(0.0, flags.jitter_sigma, pos.shape)
    if flags.color_jitter:
        colors = colors + rng.normal(0.0, flags.color_sigma, colors.shape)
    if pos is pc.positions and colors is pc.colors:
        return pc
    return PointCloud(pos, colors, pc.labels.copy())


def _rigid_grid_transform(coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random quarter-turn about z plus x/y flips, recentred on the origin in x/y.

    Stays on the integer grid, so no two voxels of one scene ever merge.
    """
    out = coords.copy()
    for _ in range(int(rng.integers(0, 4))):
        out[:, [0, 1]] = np.stack([-out[:, 1], out[:, 0]], axis=1)
    flips = rng.random(2) < 0.5
    out[:, 0] *= -1 if flips[0] else 1
    out[:, 1] *= -1 if flips[1] else 1
    center = np.floor(out[:, :2].mean(axis=0)).astype(np.int64)
    out[:, :2] -= center
    return out


def mix_scenes(a: VoxelizedScene, b: VoxelizedScene, rng: np.random.Generator | None = None, augment: bool = True) -> VoxelizedScene:
    """Union of two voxelized scenes as one training sample.

    Each scene is rigidly transformed independently first (when ``augment``).
    Colliding voxels average their features and keep the label of ``a``.
    """
    if a.voxel_size != b.voxel_size:
        raise ValueError(f"voxel_size mismatch: {a.voxel_size} vs {b.voxel_size}")
    ca, cb = a.coords, b.coords
    if augment:
        rng = rng if rng is not None else np.random.default_rng()
        ca = _rigid_grid_transform(ca, rng)
        cb = _rigid_grid_transform(cb, rng)
    stacked = np.concatenate([ca, cb])
    batched = np.concatenate([np.zeros((len(stacked), 1), np.int64), stacked], axis=1)
    cmap, inverse = build_coordinate_map(batched)
    m = len(cmap)
    inv_a, inv_b = inverse[: len(ca)], inverse[len(ca):]
    feats = np.zeros((m, a.features.shape[1]))
    np.add.at(feats, inverse, np.concatenate([a.features, b.features]))
    feats /= np.bincount(inverse, minlength=m)[:, None]
    labels = np.empty(m, dtype=np.int64)
    labels[inv_b] = b.labels
    labels[inv_a] = a.labels
    point_rows = np.concatenate([inv_a[a.inverse], inv_b[b.inverse]])
    return VoxelizedScene(cmap.coords[:, 1:].copy(), feats, labels, point_rows, a.voxel_size)
