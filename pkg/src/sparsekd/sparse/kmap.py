"""Kernel maps: the gather/scatter plan of a generalized sparse convolution."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .coords import CoordinateMap


def kernel_offsets(kernel_size: int, dim: int, centered: bool) -> np.ndarray:
    """Offsets in lexicographic order.

    Centered kernels span ``-K//2 .. K//2`` per axis, non-centered ones
    ``0 .. K-1`` (used by non-overlapping strided kernels).
    """
    if centered:
        if kernel_size % 2 == 0:
            raise ValueError(f"centered kernels need an odd size, got {kernel_size}")
        r = kernel_size // 2
        axis = range(-r, r + 1)
    else:
        axis = range(kernel_size)
    return np.array(list(itertools.product(axis, repeat=dim)), dtype=np.int64).reshape(-1, dim)


@dataclass(frozen=True)
class KernelMap:
    """Per-offset ``(in_row, out_row)`` pair lists, each sorted by ``out_row``."""

    offsets: np.ndarray
    in_rows: tuple
    out_rows: tuple
    n_in: int
    n_out: int
    kernel_size: int
    stride: int
    transposed: bool
    _table: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def volume(self) -> int:
        return len(self.offsets)

    def pairs(self, k: int) -> list[tuple[int, int]]:
        return list(zip(self.in_rows[k].tolist(), self.out_rows[k].tolist()))

    def num_pairs(self) -> int:
        return int(sum(len(r) for r in self.in_rows))

    def neighbor_table(self) -> np.ndarray:
        """``(n_out, volume)`` input row per output and offset; ``n_in`` marks a hole."""
        if "nbr" not in self._table:
            nbr = np.full((self.n_out, self.volume), self.n_in, dtype=np.int64)
            for k in range(self.volume):
                nbr[self.out_rows[k], k] = self.in_rows[k]
            self._table["nbr"] = nbr
        return self._table["nbr"]


def _offset_layout(kernel_size: int, stride: int) -> bool:
    """Whether offsets are centered for this kernel/stride combination."""
    if stride == 1:
        if kernel_size % 2 == 0:
            raise ValueError("stride-1 convolutions need an odd kernel size")
        return True
    if kernel_size == stride:
        return False
    if kernel_size % 2 == 1:
        return True
    raise ValueError(f"unsupported kernel_size={kernel_size} for stride={stride}")


def build_kernel_map(
    in_map: CoordinateMap,
    out_map: CoordinateMap,
    kernel_size: int,
    stride: int = 1,
    transposed: bool = False,
) -> KernelMap:
    """Enumerate every (input, output) pair touched by each kernel offset.

    A regular convolution reads ``u + k * s_in`` for output ``u``; a transposed
    one reads ``v - k * s_out`` for output ``v``, where ``s_in``/``s_out`` are
    the tensor strides of the two maps.
    """
    if kernel_size < 1 or stride < 1:
        raise ValueError("kernel_size and stride must be positive")
    if in_map.dim != out_map.dim:
        raise ValueError("dimension mismatch between coordinate maps")
    centered = _offset_layout(kernel_size, stride)
    s_in, s_out = in_map.stride, out_map.stride
    if transposed:
        if s_in != s_out * stride:
            raise ValueError(f"transposed conv expects in stride {s_out * stride}, got {s_in}")
        step = s_out
    else:
        if s_out != s_in * stride:
            raise ValueError(f"conv expects out stride {s_in * stride}, got {s_out}")
        step = s_in
    if np.any(in_map.coords[:, 1:] % s_in) or np.any(out_map.coords[:, 1:] % s_out):
        raise ValueError("stride misalignment")

    offsets = kernel_offsets(kernel_size, in_map.dim, centered)
    sign = -1 if transposed else 1
    in_rows, out_rows = [], []
    query = out_map.coords.copy()
    for off in offsets:
        query[:, 1:] = out_map.coords[:, 1:] + sign * off * step
        rows = in_map.lookup(query)
        hit = np.flatnonzero(rows >= 0)
        in_rows.append(rows[hit])
        out_rows.append(hit.astype(np.int64))
    return KernelMap(
        offsets=offsets,
        in_rows=tuple(in_rows),
        out_rows=tuple(out_rows),
        n_in=len(in_map),
        n_out=len(out_map),
        kernel_size=kernel_size,
        stride=stride,
        transposed=transposed,
    )
