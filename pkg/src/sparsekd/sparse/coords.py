"""Integer voxel coordinate maps.

Coordinates are stored as an ``(N, 1 + D)`` int64 array whose first column is
the batch index. Spatial coordinates are kept in voxel units at every tensor
stride (a stride-4 map only holds multiples of 4), which keeps coordinates of
different resolutions directly comparable.
"""

from __future__ import annotations

import numpy as np

_KEY_LIMIT = 2**62


class CoordinateMap:
    """Deduplicated, lexicographically sorted set of batched coordinates.

    Instances are treated as immutable once built; ``lookup`` is an exact
    reverse index built on sorted mixed-radix keys.
    """

    def __init__(self, coords: np.ndarray, stride: int = 1, *, _canonical: bool = False):
        coords = np.asarray(coords)
        if coords.ndim != 2 or coords.shape[1] < 2:
            raise ValueError("coordinates must have shape (N, 1 + D)")
        if not np.issubdtype(coords.dtype, np.integer):
            raise TypeError("coordinates must be integers")
        if stride < 1:
            raise ValueError("stride must be positive")
        coords = coords.astype(np.int64, copy=False)
        if not _canonical:
            coords = np.unique(coords, axis=0)
        self.coords = coords
        self.coords.setflags(write=False)
        self.stride = int(stride)
        self._lo = coords.min(axis=0) if len(coords) else np.zeros(coords.shape[1], np.int64)
        self._radix = (coords.max(axis=0) - self._lo + 1) if len(coords) else np.ones(coords.shape[1], np.int64)
        total = 1
        for r in self._radix:
            total *= int(r)
        self._packed = total < _KEY_LIMIT
        if self._packed:
            self._keys = self._encode(coords)
        else:
            self._dict = {tuple(c): i for i, c in enumerate(coords.tolist())}

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoordinateMap):
            return NotImplemented
        return self.stride == other.stride and np.array_equal(self.coords, other.coords)

    def __hash__(self):
        return hash((self.stride, self.coords.tobytes()))

    def __repr__(self) -> str:
        return f"CoordinateMap(size={len(self)}, dim={self.dim}, stride={self.stride})"

    @property
    def dim(self) -> int:
        return self.coords.shape[1] - 1

    @property
    def batch_size(self) -> int:
        return int(self.coords[:, 0].max()) + 1 if len(self) else 0

    def _encode(self, coords: np.ndarray) -> np.ndarray:
        key = np.zeros(len(coords), dtype=np.int64)
        for col in range(coords.shape[1]):
            key = key * self._radix[col] + (coords[:, col] - self._lo[col])
        return key

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row index of every query coordinate, ``-1`` where absent."""
        query = np.asarray(query, dtype=np.int64)
        if len(self) == 0 or len(query) == 0:
            return np.full(len(query), -1, dtype=np.int64)
        if not self._packed:
            return np.array([self._dict.get(tuple(q), -1) for q in query.tolist()], dtype=np.int64)
        inside = np.all((query >= self._lo) & (query < self._lo + self._radix), axis=1)
        out = np.full(len(query), -1, dtype=np.int64)
        if not inside.any():
            return out
        keys = self._encode(query[inside])
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        rows = np.where(hit, pos, -1)
        out[inside] = rows
        return out

    def index(self, coord) -> int:
        row = int(self.lookup(np.asarray(coord, dtype=np.int64)[None])[0])
        if row < 0:
            raise KeyError(tuple(coord))
        return row


def build_coordinate_map(coords, stride: int = 1) -> tuple[CoordinateMap, np.ndarray]:
    """Deduplicate ``coords`` into a canonical map.

    Returns the map and, for every input row, its row in the map.
    """
    coords = np.asarray(coords)
    if coords.size == 0 or len(coords) == 0:
        raise ValueError("empty coordinate set")
    if not np.issubdtype(coords.dtype, np.integer):
        raise TypeError("coordinates must be integers")
    uniq, inverse = np.unique(coords.astype(np.int64), axis=0, return_inverse=True)
    if stride > 1 and np.any(uniq[:, 1:] % stride):
        raise ValueError("stride misalignment")
    return CoordinateMap(uniq, stride, _canonical=True), inverse.reshape(-1).astype(np.int64)


def stride_coordinates(cmap: CoordinateMap, in_stride: int, factor: int) -> CoordinateMap:
    """Quantize a map to ``in_stride * factor`` by floor division."""
    if factor < 1:
        raise ValueError(f"stride factor must be >= 1, got {factor}")
    if in_stride < 1:
        raise ValueError("in_stride must be positive")
    spatial = cmap.coords[:, 1:]
    if np.any(spatial % in_stride):
        raise ValueError("stride misalignment")
    if factor == 1:
        return cmap if cmap.stride == in_stride else CoordinateMap(cmap.coords, in_stride, _canonical=True)
    out_stride = in_stride * factor
    coarse = cmap.coords.copy()
    coarse[:, 1:] = (spatial // out_stride) * out_stride
    return CoordinateMap(coarse, out_stride)
