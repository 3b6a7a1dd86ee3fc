from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..distill.losses import IGNORE_LABEL
from ..sparse import SparseTensor, build_coordinate_map


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.clip(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.colors) != n or len(self.labels) != n:
            raise ValueError("positions, colors and labels must have the same length")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite point positions")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class VoxelizedScene:
    coords: np.ndarray  # (M, 3) int64, canonical order
    features: np.ndarray  # (M, 3) mean color
    labels: np.ndarray  # (M,)
    inverse: np.ndarray  # (N,) voxel row of every source point
    voxel_size: float

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def sparse(self) -> SparseTensor:
        batched = np.concatenate([np.zeros((len(self.coords), 1), np.int64), self.coords], axis=1)
        cmap, _ = build_coordinate_map(batched)
        return SparseTensor(self.features, cmap)


def majority_vote(rows: np.ndarray, labels: np.ndarray, n_rows: int, ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """Most frequent non-ignore label per row; ties go to the lowest class id."""
    out = np.full(n_rows, ignore_label, dtype=np.int64)
    valid = labels != ignore_label
    if not valid.any():
        return out
    k = int(labels[valid].max()) + 1
    counts = np.bincount(rows[valid] * k + labels[valid], minlength=n_rows * k).reshape(n_rows, k)
    has = counts.sum(axis=1) > 0
    out[has] = counts[has].argmax(axis=1)
    return out


def voxelize(pc: PointCloud, voxel_size: float, ignore_label: int = IGNORE_LABEL) -> VoxelizedScene:
    """Floor-quantize points; average colors and majority-vote labels per voxel."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(pc) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    q = np.floor(pc.positions / voxel_size).astype(np.int64)
    cmap, inverse = build_coordinate_map(np.concatenate([np.zeros((len(q), 1), np.int64), q], axis=1))
    m = len(cmap)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    feats = np.stack([np.bincount(inverse, weights=pc.colors[:, c], minlength=m) for c in range(3)], axis=1)
    feats /= counts[:, None]
    labels = majority_vote(inverse, pc.labels, m, ignore_label)
    return VoxelizedScene(cmap.coords[:, 1:].copy(), feats, labels, inverse, float(voxel_size))


def occupancy_stats(pc: PointCloud, voxel_sizes, bounds=None) -> list[tuple[float, float]]:
    """Occupied fraction of the axis-aligned voxel grid at each voxel size.

    ``bounds=(lo, hi)`` fixes the grid extent in meters; by default it is
    the points' bounding box.
    """
    if len(pc) == 0:
        raise ValueError("empty scene")
    if bounds is None:
        lo, hi = pc.positions.min(axis=0), pc.positions.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    table = []
    for vs in voxel_sizes:
        q = np.floor(pc.positions / vs).astype(np.int64)
        occupied = len(np.unique(q, axis=0))
        qlo = np.floor(lo / vs).astype(np.int64)
        if bounds is None:
            qhi = np.floor(hi / vs).astype(np.int64)
        else:
            # half-open extent: a 1 m box at 5 cm spans exactly 20 cells
            qhi = np.ceil(hi / vs - 1e-9).astype(np.int64) - 1
        cells = int(np.prod(np.maximum(qhi - qlo + 1, 1)))
        table.append((float(vs), occupied / cells))
    return table
