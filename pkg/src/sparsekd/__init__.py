"""Sparse 3D convolution in numpy with hand-written backward passes, for distilling segmentation networks."""

__version__ = "0.1.0"

from .distill import DistillConfig
from .models import ArchSpec, Res16UNet, build_res16unet, parse_arch
from .sparse import CoordinateManager, CoordinateMap, SparseTensor
from .train import OptimConfig, evaluate, train_distill, train_supervised

__all__ = [
    "ArchSpec",
    "CoordinateManager",
    "CoordinateMap",
    "DistillConfig",
    "OptimConfig",
    "Res16UNet",
    "SparseTensor",
    "build_res16unet",
    "evaluate",
    "parse_arch",
    "train_distill",
    "train_supervised",
]
