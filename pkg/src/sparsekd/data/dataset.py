"""Scene collections, on-disk manifests and batch collation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ..sparse import SparseTensor, build_coordinate_map
from .pointcloud import PointCloud, VoxelizedScene, voxelize
from .ply import load_ply
from .synth import SceneParams, synth_scene

MANIFEST_VERSION = 1


@dataclass
class Batch:
    x: SparseTensor
    labels: np.ndarray
    scene_ids: tuple


def collate(scenes: list[VoxelizedScene], scene_ids=None, dtype=np.float32) -> Batch:
    """Stack scenes into one batched sparse tensor; input features are colors shifted to [-0.5, 0.5]."""
    coords = np.concatenate(
        [np.concatenate([np.full((len(s), 1), b, np.int64), s.coords], axis=1) for b, s in enumerate(scenes)]
    )
    feats = np.concatenate([s.features for s in scenes]) - 0.5
    labels = np.concatenate([s.labels for s in scenes])
    cmap, inverse = build_coordinate_map(coords)
    if len(cmap) != len(coords):
        raise ValueError("duplicate voxels inside a scene")
    order = np.empty(len(inverse), np.int64)
    order[inverse] = np.arange(len(inverse))
    ids = tuple(scene_ids) if scene_ids is not None else tuple(range(len(scenes)))
    return Batch(SparseTensor(feats[order].astype(dtype), cmap), labels[order], ids)


def write_manifests(out_dir, seed: int, scenes: int, params: SceneParams, val_fraction: float = 0.2) -> list[Path]:
    """One YAML descriptor per scene plus ``split.yaml``; scenes are regenerated from their seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, size=scenes)
    names = []
    for i, s in enumerate(scene_seeds):
        name = f"scene_{i:04d}.yaml"
        doc = {"version": MANIFEST_VERSION, "kind": "synthetic", "seed": int(s), "params": params.to_dict()}
        _write_text(out / name, yaml.safe_dump(doc, sort_keys=True))
        names.append(name)
    n_val = max(1, int(round(scenes * val_fraction))) if scenes > 1 else 0
    split = {"train": names[: scenes - n_val], "val": names[scenes - n_val:]}
    _write_text(out / "split.yaml", yaml.safe_dump(split, sort_keys=True))
    return [out / n for n in names]


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_scene(path) -> PointCloud:
    """A scene from a synthetic descriptor (``.yaml``) or a ``.ply`` file."""
    path = Path(path)
    if path.suffix == ".ply":
        return load_ply(path)
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict) or doc.get("kind") != "synthetic":
        raise ValueError(f"{path}: not a synthetic scene descriptor")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
    return synth_scene(int(doc["seed"]), SceneParams(**doc["params"]))


@dataclass
class SceneSet:
    clouds: list[PointCloud]
    names: list[str]

    def __len__(self) -> int:
        return len(self.clouds)

    def voxelized(self, voxel_size: float) -> list[VoxelizedScene]:
        return [voxelize(pc, voxel_size) for pc in self.clouds]


def load_split(data_dir) -> tuple[SceneSet, SceneSet]:
    """Train/val scene sets from a directory with ``split.yaml`` (or all ``.ply`` files as train)."""
    data_dir = Path(data_dir)
    split_file = data_dir / "split.yaml"
    if split_file.exists():
        split = yaml.safe_load(split_file.read_text())
        train_names, val_names = split.get("train", []), split.get("val", [])
    else:
        plys = sorted(p.name for p in data_dir.glob("*.ply"))
        if not plys:
            raise FileNotFoundError(f"{data_dir}: no split.yaml and no .ply files")
        train_names, val_names = plys, []

    def load(names):
        return SceneSet([load_scene(data_dir / n) for n in names], list(names))

    return load(train_names), load(val_names)


def synthetic_split(seed: int, n_train: int, n_val: int, params: SceneParams | None = None) -> tuple[SceneSet, SceneSet]:
    """In-memory equivalent of ``write_manifests`` + ``load_split``."""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_train + n_val)
    clouds = [synth_scene(int(s), params) for s in seeds]
    names = [f"scene_{i:04d}" for i in range(n_train + n_val)]
    return SceneSet(clouds[:n_train], names[:n_train]), SceneSet(clouds[n_train:], names[n_train:])
