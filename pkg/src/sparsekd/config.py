"""Run configuration: one YAML file, overridable from the command line."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import AugmentFlags, SceneParams
from .distill import DistillConfig
from .models import ArchSpec, parse_arch
from .train import DataConfig, OptimConfig


@dataclass(frozen=True)
class DatasetSpec:
    """Either a directory (manifests or PLY files) or an in-memory synthetic split."""

    path: str | None = None
    seed: int = 0
    n_train: int = 40
    n_val: int = 10
    params: SceneParams = field(default_factory=SceneParams)

    def to_dict(self) -> dict:
        return {"path": self.path, "seed": self.seed, "n_train": self.n_train, "n_val": self.n_val,
                "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "params" in d:
            d["params"] = SceneParams(**d["params"])
        return cls(**d)

    def load(self):
        from .data import load_split, synthetic_split

        if self.path is not None:
            return load_split(self.path)
        return synthetic_split(self.seed, self.n_train, self.n_val, self.params)


@dataclass(frozen=True)
class RunConfig:
    arch: str = "Res16UNet34C_Quarter"
    num_classes: int = 6
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(alpha=1.0))
    optim: OptimConfig = field(default_factory=OptimConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    voxel_size: float = 0.05
    batch_size: int = 4
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    mix_prob: float = 0.0
    seed: int = 0
    epochs: int = 20
    out: str | None = None

    def __post_init__(self):
        self.arch_spec()
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.mix_prob <= 1:
            raise ValueError("mix_prob must lie in [0, 1]")

    def arch_spec(self) -> ArchSpec:
        return parse_arch(self.arch, self.num_classes)

    def data_config(self) -> DataConfig:
        return DataConfig(self.voxel_size, self.batch_size, self.augment, self.mix_prob)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "num_classes": self.num_classes,
            "distill": self.distill.to_dict(),
            "optim": self.optim.to_dict(),
            "dataset": self.dataset.to_dict(),
            "voxel_size": self.voxel_size,
            "batch_size": self.batch_size,
            "augment": self.augment.to_dict(),
            "mix_prob": self.mix_prob,
            "seed": self.seed,
            "epochs": self.epochs,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "distill" in d:
            d["distill"] = DistillConfig.from_dict(d["distill"])
        if "optim" in d:
            d["optim"] = OptimConfig.from_dict(d["optim"])
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        if "augment" in d:
            d["augment"] = AugmentFlags(**d["augment"])
        return cls(**d)

    def override(self, **flags) -> "RunConfig":
        """Apply non-None flags; dotted keys (``optim.lr``) reach nested sections."""
        top, nested = {}, {}
        for key, value in flags.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in nested.items():
            top[section] = replace(getattr(self, section), **values)
        return replace(self, **top)

    def identity(self) -> dict:
        """Everything that determines the run's results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        return d


def load_config(path) -> RunConfig:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return RunConfig.from_dict(doc)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


__all__ = ["DatasetSpec", "RunConfig", "dump_config", "load_config"]
