from __future__ import annotations

import numpy as np

from .coords import CoordinateMap, build_coordinate_map, stride_coordinates
from .kmap import KernelMap, build_kernel_map


class CoordinateManager:
    """Caches coordinate maps per tensor stride and kernel maps between them.

    Every tensor derived from one input shares a manager, so a U-Net's
    decoder lands on exactly the coordinate maps its encoder produced.
    Two networks fed the same manager see identical maps at every stride.
    """

    def __init__(self, base: CoordinateMap):
        self.maps: dict[int, CoordinateMap] = {base.stride: base}
        self._kmaps: dict[tuple, KernelMap] = {}

    def coords_at(self, stride: int) -> CoordinateMap:
        if stride not in self.maps:
            finer = max(s for s in self.maps if s < stride and stride % s == 0)
            self.maps[stride] = stride_coordinates(self.maps[finer], finer, stride // finer)
        return self.maps[stride]

    def kernel_map(self, in_stride: int, out_stride: int, kernel_size: int, transposed: bool = False) -> KernelMap:
        key = (in_stride, out_stride, kernel_size, transposed)
        if key not in self._kmaps:
            conv_stride = in_stride // out_stride if transposed else out_stride // in_stride
            self._kmaps[key] = build_kernel_map(
                self.coords_at(in_stride), self.coords_at(out_stride), kernel_size, conv_stride, transposed
            )
        return self._kmaps[key]


class SparseTensor:
    """Feature rows attached to the coordinates of one ``CoordinateMap``."""

    def __init__(self, features: np.ndarray, cmap: CoordinateMap, manager: CoordinateManager | None = None):
        features = np.asarray(features)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(features) != len(cmap):
            raise ValueError(f"feature rows ({len(features)}) != coordinates ({len(cmap)})")
        self.features = features
        self.cmap = cmap
        if manager is None:
            manager = CoordinateManager(cmap)
        self.manager = manager

    @classmethod
    def from_points(cls, coords, features) -> "SparseTensor":
        """Build from possibly duplicated coordinates; duplicate rows are averaged."""
        cmap, inverse = build_coordinate_map(coords)
        features = np.asarray(features)
        summed = np.zeros((len(cmap), features.shape[1]), dtype=features.dtype)
        np.add.at(summed, inverse, features)
        counts = np.bincount(inverse, minlength=len(cmap)).astype(features.dtype)
        return cls(summed / counts[:, None], cmap)

    @property
    def stride(self) -> int:
        return self.cmap.stride

    @property
    def coords(self) -> np.ndarray:
        return self.cmap.coords

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape

    def __len__(self) -> int:
        return len(self.features)

    def replace(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(features, self.cmap, self.manager)

    def __repr__(self) -> str:
        n, c = self.features.shape
        return f"SparseTensor(N={n}, C={c}, stride={self.stride})"
