from .coords import CoordinateMap, build_coordinate_map, stride_coordinates
from .kmap import KernelMap, build_kernel_map, kernel_offsets
from .tensor import CoordinateManager, SparseTensor

__all__ = [
    "CoordinateManager",
    "CoordinateMap",
    "KernelMap",
    "SparseTensor",
    "build_coordinate_map",
    "build_kernel_map",
    "kernel_offsets",
    "stride_coordinates",
]
