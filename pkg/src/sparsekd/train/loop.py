"""Epoch loop shared by supervised and distillation training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import AugmentFlags, SceneSet, VoxelizedScene, augment, collate, mix_scenes, voxelize
from ..distill import DistillConfig, ProjectionLayer, distill_step, make_projections
from ..models import Res16UNet, TappedOutput
from ..sparse import SparseTensor
from .checkpoint import Checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, EvalResult, result_from_confusion
from .optim import OptimConfig, Optimizer, step_lr

log = logging.getLogger(__name__)

SUPERVISED = DistillConfig(alpha=1.0, temperature=1.0, lambda_dec=0.0, lambda_enc=0.0)


@dataclass
class DataConfig:
    voxel_size: float = 0.05
    batch_size: int = 4
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    mix_prob: float = 0.0

    @property
    def static(self) -> bool:
        """Whether every epoch sees identical voxelized inputs."""
        return not self.augment.any and self.mix_prob == 0


@dataclass
class TrainResult:
    history: list
    checkpoint: Checkpoint
    proj_enc: ProjectionLayer | None = None
    proj_dec: ProjectionLayer | None = None


def evaluate(net: Res16UNet, scenes: list[VoxelizedScene], batch_size: int = 4) -> EvalResult:
    """Voxel-level confusion over ``scenes`` with the network in eval mode."""
    was_training = net.training
    net.eval()
    cm = ConfusionMatrix(net.spec.num_classes)
    dtype = net.classifier.weight.values.dtype
    try:
        for i in range(0, len(scenes), batch_size):
            batch = collate(scenes[i:i + batch_size], dtype=dtype)
            pred = net.forward(batch.x).features.argmax(axis=1)
            cm.update(pred, batch.labels)
    finally:
        net.train(was_training)
    return result_from_confusion(cm)


class TeacherCache:
    """Per-scene teacher outputs for inputs that never change between epochs."""

    def __init__(self, teacher: Res16UNet):
        self.teacher = teacher
        self._store: dict[int, tuple] = {}

    def _compute(self, scene_id: int, scene: VoxelizedScene):
        self.teacher.eval()
        dtype = self.teacher.classifier.weight.values.dtype
        out = self.teacher.forward_tapped(collate([scene], dtype=dtype).x)
        self._store[scene_id] = (
            out.logits.features,
            out.encoder_tap.features,
            out.encoder_tap.coords[:, 1:],
            out.decoder_tap.features,
        )

    def outputs(self, scene_ids, scenes, x: SparseTensor) -> TappedOutput:
        for sid, sc in zip(scene_ids, scenes):
            if sid not in self._store:
                self._compute(sid, sc)
        parts = [self._store[sid] for sid in scene_ids]
        enc_map = x.manager.coords_at(16)
        enc_coords = np.concatenate(
            [np.concatenate([np.full((len(p[2]), 1), b, np.int64), p[2]], axis=1) for b, p in enumerate(parts)]
        )
        if not np.array_equal(enc_coords, enc_map.coords):
            raise ValueError("tap alignment failure")
        dec_map = x.manager.coords_at(1)
        return TappedOutput(
            SparseTensor(np.concatenate([p[0] for p in parts]), dec_map, x.manager),
            SparseTensor(np.concatenate([p[1] for p in parts]), enc_map, x.manager),
            SparseTensor(np.concatenate([p[3] for p in parts]), dec_map, x.manager),
        )


def _training_batch(scenes: SceneSet, voxels, order, data: DataConfig, rng: np.random.Generator):
    """Voxelized scenes for one step, with augmentation and optional mixing."""
    if data.static:
        return [voxels[i] for i in order]
    out = []
    for i in order:
        pc = augment(scenes.clouds[i], rng, data.augment) if data.augment.any else scenes.clouds[i]
        vs = voxelize(pc, data.voxel_size)
        if data.mix_prob > 0 and rng.random() < data.mix_prob:
            j = int(rng.integers(len(scenes)))
            other = scenes.clouds[j]
            other = augment(other, rng, data.augment) if data.augment.any else other
            vs = mix_scenes(vs, voxelize(other, data.voxel_size), rng)
        out.append(vs)
    return out


def _mean_terms(records: list[dict]) -> dict:
    keys = records[0].keys()
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def fit(
    student: Res16UNet,
    train: SceneSet,
    val: SceneSet,
    optim_cfg: OptimConfig,
    epochs: int,
    seed: int = 0,
    *,
    teacher: Res16UNet | None = None,
    distill_cfg: DistillConfig = SUPERVISED,
    data: DataConfig | None = None,
    run_dir: Path | str | None = None,
    resume: Checkpoint | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train ``student`` for ``epochs`` epochs, optionally against a frozen ``teacher``.

    Writes ``history.jsonl``, ``checkpoint.skd`` (full training state) and
    ``model.skd`` (student only) into ``run_dir`` when given.
    """
    data = data or DataConfig()
    if distill_cfg.uses_teacher and teacher is None:
        raise ValueError("distillation config needs a teacher network")
    if teacher is not None:
        teacher.freeze().eval()
        if teacher.spec.num_classes != student.spec.num_classes:
            raise ValueError("teacher and student predict different class counts")
    proj_enc = proj_dec = None
    named = list(student.named_parameters(prefix="model/"))
    if teacher is not None:
        proj_enc, proj_dec = make_projections(student, teacher, seed=seed + 7919)
        named += list(proj_enc.named_parameters(prefix="proj_enc/"))
        named += list(proj_dec.named_parameters(prefix="proj_dec/"))
    optimizer = Optimizer(named, optim_cfg)
    rng = np.random.default_rng(seed)
    voxels = train.voxelized(data.voxel_size) if data.static else None
    val_voxels = val.voxelized(data.voxel_size)
    cache = TeacherCache(teacher) if teacher is not None and data.static else None

    history: list[dict] = []
    start = 0
    if resume is not None:
        _restore(resume, student, proj_enc, proj_dec, optimizer, rng)
        history = list(resume.meta["history"])
        start = int(resume.meta["epoch"])

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_history(run_dir / "history.jsonl", history)

    ckpt = None
    for epoch in range(start, epochs):
        lr = step_lr(optim_cfg.lr, optim_cfg.gamma, optim_cfg.step_size, epoch)
        perm = rng.permutation(len(train))
        records = []
        for b in range(0, len(perm), data.batch_size):
            ids = perm[b:b + data.batch_size].tolist()
            scenes = _training_batch(train, voxels, ids, data, rng)
            batch = collate(scenes, ids)
            teacher_out = None
            if distill_cfg.uses_teacher:
                teacher_out = cache.outputs(ids, scenes, batch.x) if cache else None
            optimizer.zero_grad()
            terms = distill_step(student, teacher, batch.x, batch.labels, distill_cfg, proj_enc, proj_dec, teacher_out)
            optimizer.step(lr)
            records.append(terms.as_dict())
        result = evaluate(student, val_voxels, data.batch_size) if len(val_voxels) else None
        rec = {"epoch": epoch + 1, "lr": lr, **_mean_terms(records)}
        rec["val_miou"] = result.miou if result else None
        rec["val_macc"] = result.macc if result else None
        history.append(rec)
        log.info("epoch %d lr %.4g loss %.4f val mIoU %s", epoch + 1, lr, rec["loss"], rec["val_miou"])
        ckpt = _snapshot(student, proj_enc, proj_dec, optimizer, rng, epoch + 1, history, distill_cfg, data, meta)
        if run_dir is not None:
            _append_history(run_dir / "history.jsonl", rec)
            save_checkpoint(run_dir / "checkpoint.skd", ckpt)
    if ckpt is None:
        ckpt = _snapshot(student, proj_enc, proj_dec, optimizer, rng, start, history, distill_cfg, data, meta)
    if run_dir is not None:
        save_checkpoint(run_dir / "model.skd", export_model(ckpt))
    return TrainResult(history, ckpt, proj_enc, proj_dec)


def train_supervised(net, train, val, optim_cfg, epochs, seed=0, **kw) -> TrainResult:
    return fit(net, train, val, optim_cfg, epochs, seed, **kw)


def train_distill(student, teacher, train, val, distill_cfg, optim_cfg, epochs, seed=0, **kw) -> TrainResult:
    return fit(student, train, val, optim_cfg, epochs, seed, teacher=teacher, distill_cfg=distill_cfg, **kw)


def _snapshot(student, proj_enc, proj_dec, optimizer, rng, epoch, history, distill_cfg, data, meta) -> Checkpoint:
    tensors = {f"model/{k}": v.copy() for k, v in student.state_dict().items()}
    for prefix, proj in (("proj_enc", proj_enc), ("proj_dec", proj_dec)):
        if proj is not None:
            tensors.update({f"{prefix}/{k}": v.copy() for k, v in proj.state_dict().items()})
    opt_tensors, opt_meta = optimizer.state_dict()
    tensors.update({f"optim/{k}": v.copy() for k, v in sorted(opt_tensors.items())})
    info = {
        "arch": student.spec.to_dict(),
        "distill": distill_cfg.to_dict(),
        "epoch": epoch,
        "history": [dict(h) for h in history],
        "optim": opt_meta,
        "rng": rng.bit_generator.state,
        "data": {"voxel_size": data.voxel_size, "batch_size": data.batch_size,
                 "augment": data.augment.to_dict(), "mix_prob": data.mix_prob},
    }
    if meta:
        info["run"] = meta
    return Checkpoint(tensors, info)


def export_model(ckpt: Checkpoint) -> Checkpoint:
    """Student weights and architecture only; projections and optimizer state are dropped."""
    tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("model/")}
    keep = ("arch", "distill", "epoch", "history", "run")
    return Checkpoint(tensors, {k: ckpt.meta[k] for k in keep if k in ckpt.meta})


def _restore(ckpt, student, proj_enc, proj_dec, optimizer, rng) -> None:
    from .checkpoint import load_into_network

    load_into_network(ckpt, student, "model")
    if proj_enc is not None:
        proj_enc.load_state_dict(ckpt.group("proj_enc"))
        proj_dec.load_state_dict(ckpt.group("proj_dec"))
    optimizer.load_state_dict(ckpt.group("optim"), ckpt.meta["optim"])
    rng.bit_generator.state = ckpt.meta["rng"]


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _append_history(path: Path, rec: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
