from .augment import AugmentFlags, augment, mix_scenes
from .dataset import Batch, SceneSet, collate, load_scene, load_split, synthetic_split, write_manifests
from .ply import PlyError, load_ply, write_ply
from .pointcloud import PointCloud, VoxelizedScene, majority_vote, occupancy_stats, voxelize
from .synth import SceneParams, class_palette, synth_scene

__all__ = [
    "AugmentFlags",
    "Batch",
    "PlyError",
    "PointCloud",
    "SceneParams",
    "SceneSet",
    "VoxelizedScene",
    "augment",
    "class_palette",
    "collate",
    "load_ply",
    "load_scene",
    "load_split",
    "majority_vote",
    "mix_scenes",
    "occupancy_stats",
    "synth_scene",
    "synthetic_split",
    "voxelize",
    "write_manifests",
    "write_ply",
]
