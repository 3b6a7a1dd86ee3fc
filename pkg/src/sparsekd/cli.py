"""Command-line entry point: ``sparsekd <command>``.

Set ``SPARSEKD_NUM_THREADS`` to cap the BLAS thread pool. Failures exit
nonzero with one JSON line on stderr: ``{"error": ..., "message": ...}``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import sys
import zlib
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import RunConfig, dump_config, load_config
from .data import AugmentFlags, SceneParams, load_split, occupancy_stats, write_manifests
from .distill import DistillConfig
from .models import ArchSpec, build_res16unet, param_count, parse_arch
from .report import EVAL_FILE, write_report
from .train import (
    ConfusionMatrix,
    class_names,
    evaluate,
    fit,
    load_checkpoint,
    load_into_network,
    result_from_confusion,
)

THREADS_ENV = "SPARSEKD_NUM_THREADS"
log = logging.getLogger("sparsekd")


class CommandError(Exception):
    """A user-facing failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress to stderr.")
@click.pass_context
def main(ctx, verbose):
    """Sparse 3D segmentation networks and knowledge distillation on CPU."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        from threadpoolctl import threadpool_limits

        if not threads.isdigit() or int(threads) < 1:
            raise CommandError("bad_env", f"{THREADS_ENV} must be a positive integer, got {threads!r}")
        ctx.with_resource(threadpool_limits(limits=int(threads)))


# ---------------------------------------------------------------- gen-data


@main.command("gen-data")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scenes", type=int, default=40, show_default=True)
@click.option("--classes", type=int, default=6, show_default=True)
@click.option("--points-per-class", type=int, default=500, show_default=True)
@click.option("--color-noise", type=float, default=0.12, show_default=True)
@click.option("--val-fraction", type=float, default=0.2, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def gen_data(seed, scenes, classes, points_per_class, color_noise, val_fraction, out, force):
    """Write synthetic scene manifests and a train/val split."""
    try:
        params = SceneParams(classes=classes, points_per_class=points_per_class, color_noise=color_noise)
    except ValueError as err:
        raise CommandError("bad_args", str(err)) from None
    if scenes < 1:
        raise CommandError("bad_args", "--scenes must be >= 1")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CommandError("out_exists", f"{out} is not empty (use --force to overwrite)")
        for p in list(out.glob("scene_*.yaml")) + [out / "split.yaml"]:
            p.unlink(missing_ok=True)
    paths = write_manifests(out, seed, scenes, params, val_fraction)
    click.echo(f"wrote {len(paths)} scene manifests and split.yaml to {out}")


# ---------------------------------------------------------------- training


def _training_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML run config."),
        click.option("--data", type=click.Path(file_okay=False), help="Scene directory (manifests or PLY)."),
        click.option("--arch", help="Res16UNet34C, Res16UNet34C_Half, Res16UNet34C_Quarter or Res16UNet34C@divisor=N."),
        click.option("--classes", "num_classes", type=int),
        click.option("--epochs", type=int),
        click.option("--lr", type=float),
        click.option("--optimizer", type=click.Choice(["sgd_momentum", "adam"])),
        click.option("--step-size", type=int),
        click.option("--gamma", type=float),
        click.option("--weight-decay", type=float),
        click.option("--batch-size", type=int),
        click.option("--voxel-size", type=float),
        click.option("--seed", type=int),
        click.option("--mix-prob", type=float, help="Probability of mixing each sample with another scene."),
        click.option("--augment/--no-augment", default=None, help="Rotation, flips, jitter and color jitter."),
        click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Continue from checkpoint.skd."),
        click.option("--out", type=click.Path(file_okay=False)),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _effective_config(kw: dict, **extra) -> RunConfig:
    cfg = load_config(kw["config_path"]) if kw.get("config_path") else RunConfig()
    flags = {
        "arch": kw.get("arch"),
        "num_classes": kw.get("num_classes"),
        "epochs": kw.get("epochs"),
        "batch_size": kw.get("batch_size"),
        "voxel_size": kw.get("voxel_size"),
        "seed": kw.get("seed"),
        "mix_prob": kw.get("mix_prob"),
        "out": kw.get("out"),
        "optim.lr": kw.get("lr"),
        "optim.kind": kw.get("optimizer"),
        "optim.step_size": kw.get("step_size"),
        "optim.gamma": kw.get("gamma"),
        "optim.weight_decay": kw.get("weight_decay"),
        "dataset.path": kw.get("data"),
        **extra,
    }
    if kw.get("augment") is not None:
        on = kw["augment"]
        flags["augment"] = AugmentFlags(rotate_z=on, flip_xy=on, jitter=on, color_jitter=on)
    cfg = cfg.override(**flags)
    if cfg.out is None:
        raise CommandError("bad_args", "no output directory (pass --out or set 'out' in the config)")
    return cfg


def _write_final_eval(out: Path, net, val, cfg: RunConfig) -> dict | None:
    if len(val) == 0:
        return None
    res = evaluate(net, val.voxelized(cfg.voxel_size), cfg.batch_size)
    doc = {
        "miou": res.miou,
        "macc": res.macc,
        "iou": [None if math.isnan(v) else float(v) for v in res.iou],
        "classes": list(class_names(net.spec.num_classes)),
        "confusion": res.confusion.counts.tolist(),
    }
    (out / EVAL_FILE).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return doc


def _run_training(cfg: RunConfig, resume, teacher=None, teacher_info=None) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    train, val = cfg.dataset.load()
    if len(train) == 0:
        raise CommandError("no_data", "training split is empty")
    net = build_res16unet(cfg.arch_spec(), seed=cfg.seed)
    ckpt = load_checkpoint(resume) if resume else None
    meta = {"config": cfg.identity()}
    if teacher_info:
        meta["teacher"] = teacher_info
    kw = {"teacher": teacher, "distill_cfg": cfg.distill} if teacher is not None else {}
    result = fit(net, train, val, cfg.optim, cfg.epochs, cfg.seed, data=cfg.data_config(), run_dir=out,
                 resume=ckpt, meta=meta, **kw)
    final = _write_final_eval(out, net, val, cfg)
    last = result.history[-1] if result.history else None
    summary = f"{cfg.arch}: {len(result.history)} epochs"
    if last:
        summary += f", final loss {last['loss']:.4f}"
    if final:
        summary += f", val mIoU {100 * final['miou']:.1f}%"
    click.echo(summary + f" -> {out}")


@main.command("train-teacher")
@_training_options
def train_teacher(**kw):
    """Supervised training with cross-entropy only."""
    cfg = _effective_config(kw)
    if cfg.distill.uses_teacher or cfg.distill.lambda_dec or cfg.distill.lambda_enc:
        raise CommandError("bad_config", "train-teacher config requests teacher losses; use 'distill'")
    _run_training(cfg, kw.get("resume"))


def combination_label(d: DistillConfig) -> str:
    """Human-readable loss combination, e.g. ``alpha=0.5 T=1 +decoder +encoder``."""
    parts = [f"alpha={d.alpha:g}", f"T={d.temperature:g}"]
    if d.lambda_dec:
        parts.append(f"+decoder(x{d.lambda_dec:g})")
    if d.lambda_enc:
        parts.append(f"+encoder(x{d.lambda_enc:g})")
    if d.fm_softmax:
        parts.append("fm-softmax")
    return " ".join(parts)


def load_network(path, expected: ArchSpec | None = None):
    """Rebuild a network from a checkpoint's architecture record and load its weights."""
    if not Path(path).is_file():
        raise CommandError("missing_checkpoint", f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if "arch" not in ckpt.meta:
        raise CommandError("bad_checkpoint", f"{path}: no architecture record")
    spec = ArchSpec.from_dict(ckpt.meta["arch"])
    if expected is not None and spec != expected:
        raise CommandError("arch_mismatch", f"checkpoint architecture {spec.name} does not match requested {expected.name}")
    net = build_res16unet(spec)
    load_into_network(ckpt, net, "model")
    return net, ckpt


@main.command()
@_training_options
@click.option("--teacher", "teacher_path", type=click.Path(dir_okay=False), help="Teacher checkpoint (model.skd).")
@click.option("--alpha", type=float, help="Weight of cross-entropy against teacher KL.")
@click.option("--temperature", type=float)
@click.option("--lambda-dec", type=float, help="Decoder feature-map loss weight.")
@click.option("--lambda-enc", type=float, help="Encoder (bottleneck) feature-map loss weight.")
@click.option("--fm-softmax/--no-fm-softmax", default=None)
@click.option("--t2-scaling/--no-t2-scaling", default=None)
def distill(teacher_path, alpha, temperature, lambda_dec, lambda_enc, fm_softmax, t2_scaling, **kw):
    """Train a narrower student against a frozen teacher."""
    cfg = _effective_config(kw, **{
        "distill.alpha": alpha,
        "distill.temperature": temperature,
        "distill.lambda_dec": lambda_dec,
        "distill.lambda_enc": lambda_enc,
        "distill.fm_softmax": fm_softmax,
        "distill.t2_scaling": t2_scaling,
    })
    if teacher_path is None:
        raise CommandError("missing_checkpoint", "distill needs --teacher")
    teacher, _ = load_network(teacher_path)
    student = cfg.arch_spec()
    if teacher.spec.num_classes != student.num_classes:
        raise CommandError("arch_mismatch", f"teacher predicts {teacher.spec.num_classes} classes, config {student.num_classes}")
    if student.width_divisor % teacher.spec.width_divisor:
        raise CommandError(
            "arch_mismatch",
            f"student {student.name} is not a uniform narrowing of teacher {teacher.spec.name}",
        )
    click.echo(f"teacher {teacher.spec.name} -> student {student.name}: {combination_label(cfg.distill)}")
    crc = zlib.crc32(Path(teacher_path).read_bytes())
    _run_training(cfg, kw.get("resume"), teacher, {"arch": teacher.spec.to_dict(), "crc32": crc})


# ---------------------------------------------------------------- eval


@main.command("eval")
@click.argument("checkpoint", required=False, type=click.Path(dir_okay=False))
@click.option("--data", type=click.Path(file_okay=False), help="Scene directory; defaults to the run's dataset.")
@click.option("--split", type=click.Choice(["val", "train", "all"]), default="val", show_default=True)
@click.option("--voxel-size", type=float)
@click.option("--arch", help="Refuse checkpoints of any other architecture.")
@click.option("--predictions", type=click.Path(exists=True, dir_okay=False),
              help="Score stored per-voxel predictions (.npz keyed by scene name) instead of a network.")
@click.option("--classes", "num_classes", type=int, help="Class count when scoring --predictions.")
def eval_cmd(checkpoint, data, split, voxel_size, arch, predictions, num_classes):
    """Evaluate on a split and print the per-class IoU table."""
    net = ckpt = None
    if checkpoint is not None:
        net, ckpt = load_network(checkpoint)
        if arch and parse_arch(arch, net.spec.num_classes) != net.spec:
            raise CommandError("arch_mismatch", f"checkpoint architecture {net.spec.name} does not match --arch {arch}")
    elif predictions is None:
        raise CommandError("bad_args", "pass a checkpoint or --predictions")
    run_cfg = RunConfig.from_dict({**ckpt.meta["run"]["config"], "out": None}) if ckpt and "run" in ckpt.meta else None
    if data is not None:
        train, val = load_split(data)
    elif run_cfg is not None:
        train, val = run_cfg.dataset.load()
    else:
        raise CommandError("bad_args", "no dataset: pass --data")
    scenes = {"val": val, "train": train}.get(split)
    if split == "all":
        from .data import SceneSet

        scenes = SceneSet(train.clouds + val.clouds, train.names + val.names)
    if len(scenes) == 0:
        raise CommandError("no_data", f"split {split!r} is empty")
    vs = voxel_size or (run_cfg.voxel_size if run_cfg else 0.05)
    voxels = scenes.voxelized(vs)
    if predictions is not None:
        k = net.spec.num_classes if net else num_classes
        if k is None:
            raise CommandError("bad_args", "--predictions needs --classes")
        stored = np.load(predictions)
        cm = ConfusionMatrix(k)
        for name, sc in zip(scenes.names, voxels):
            if name not in stored:
                raise CommandError("missing_predictions", f"no predictions for scene {name}")
            pred = stored[name]
            if pred.shape != sc.labels.shape:
                raise CommandError("bad_predictions", f"{name}: {pred.shape[0]} predictions for {len(sc.labels)} voxels")
            cm.update(pred, sc.labels)
        result = result_from_confusion(cm)
    else:
        result = evaluate(net, voxels)
    click.echo(result.table())


# ---------------------------------------------------------------- inspect


def _ratio_table(classes: int) -> list[str]:
    counts = {d: param_count(build_res16unet(ArchSpec(width_divisor=d, num_classes=classes))).trainable for d in (1, 2, 4, 8)}
    lines = [f"{'divisor':>7} {'trainable':>12} {'ratio to divisor 1':>19}"]
    for d, c in counts.items():
        lines.append(f"{d:>7} {c:>12,} {counts[1] / c:>19.2f}")
    return lines


@main.command()
@click.argument("checkpoint", required=False, type=click.Path(dir_okay=False))
@click.option("--arch", help="Architecture name when no checkpoint is given.")
@click.option("--classes", "num_classes", type=int, default=20, show_default=True)
@click.option("--layers", is_flag=True, help="List every parameter tensor with its shape.")
@click.option("--ratios/--no-ratios", default=True, show_default=True, help="Print the divisor ratio table.")
@click.option("--data", type=click.Path(file_okay=False), help="Report occupancy for scenes in this directory.")
@click.option("--voxel-sizes", default="0.2,0.05,0.025", show_default=True)
def inspect(checkpoint, arch, num_classes, layers, ratios, data, voxel_sizes):
    """Parameter counts, layer shapes and scene occupancy."""
    if checkpoint is not None:
        net, _ = load_network(checkpoint)
    elif arch is not None:
        net = build_res16unet(parse_arch(arch, num_classes))
    else:
        net = None
    if net is not None:
        pc = param_count(net)
        spec = net.spec
        click.echo(f"architecture {spec.name} (width divisor {spec.width_divisor}, {spec.num_classes} classes)")
        click.echo(f"planes {list(spec.planes)}")
        click.echo(f"trainable parameters {pc.trainable:,} ({pc.trainable / 1e6:.2f}M)")
        click.echo(f"total parameters {pc.total:,} (including batch-norm running statistics)")
        if layers:
            for name, p in net.named_parameters():
                click.echo(f"  {name:<40} {str(p.shape):<20} {p.size:>10,}")
        if ratios:
            click.echo("")
            for line in _ratio_table(spec.num_classes):
                click.echo(line)
    if data is not None:
        sizes = [float(s) for s in voxel_sizes.split(",")]
        train, val = load_split(data)
        click.echo("")
        click.echo(f"{'scene':<20}" + "".join(f"{f'{100 * s:g}cm':>10}" for s in sizes))
        for name, cloud in zip(train.names + val.names, train.clouds + val.clouds):
            fr = occupancy_stats(cloud, sizes)
            click.echo(f"{name:<20}" + "".join(f"{100 * f:>9.3f}%" for _, f in fr))
    if net is None and data is None:
        raise CommandError("bad_args", "pass a checkpoint, --arch or --data")


# ---------------------------------------------------------------- gradcheck


@main.command("gradcheck")
@click.option("--arch", default="Res16UNet34C@divisor=8", show_default=True, help="Name, or 'divisor=N'.")
@click.option("--sites", type=int, default=20, show_default=True)
@click.option("--classes", "num_classes", type=int, default=20, show_default=True)
@click.option("--entries", type=int, default=3, show_default=True, help="Sampled coordinates per tensor.")
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck_cmd(arch, sites, num_classes, entries, tol, seed):
    """Finite-difference check of every layer's backward pass (float64)."""
    from .nn import gradcheck, scattered_sites

    if arch.startswith("divisor="):
        arch = f"Res16UNet34C@{arch}"
    spec = parse_arch(arch, num_classes)
    net = build_res16unet(spec, seed=seed).astype(np.float64)
    x = scattered_sites(sites, spec.in_channels, seed)
    report = gradcheck(net, x, entries=entries, tol=tol, seed=seed)
    click.echo(report.format())
    if not report.ok:
        raise CommandError("gradcheck_failed", f"{len(report.failures())} tensors exceed rel err {tol:g}")


# ---------------------------------------------------------------- report


@main.command()
@click.argument("run_dir", type=click.Path())
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default RUN_DIR/report).")
def report(run_dir, out):
    """Render loss/mIoU curves and a per-class table from run histories."""
    for path in write_report(run_dir, out):
        click.echo(f"wrote {path}")


# ---------------------------------------------------------------- entry


def _error_line(code: str, message: str) -> str:
    return json.dumps({"error": code, "message": " ".join(str(message).split())})


def run(argv=None) -> int:
    """Run the CLI and return its exit code; errors become one JSON line on stderr."""
    try:
        rv = main.main(args=argv, prog_name="sparsekd", standalone_mode=False)
    except CommandError as err:
        click.echo(_error_line(err.code, err), err=True)
        return 1
    except click.exceptions.Exit as err:
        return err.exit_code
    except click.ClickException as err:
        click.echo(_error_line("usage", err.format_message()), err=True)
        return 2
    except click.exceptions.Abort:
        click.echo(_error_line("aborted", "aborted"), err=True)
        return 130
    except Exception as err:  # noqa: BLE001 - every failure must surface as one parseable line
        click.echo(_error_line(type(err).__name__, err), err=True)
        return 1
    return rv if isinstance(rv, int) else 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
