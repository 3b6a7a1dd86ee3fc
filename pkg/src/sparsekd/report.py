"""Static run reports: overlaid training curves and a per-class IoU table."""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .train import class_names, read_history

EVAL_FILE = "final_eval.json"


@dataclass
class RunRecord:
    name: str
    history: list
    final: dict | None


def find_runs(root) -> list[RunRecord]:
    """The run at ``root`` itself, or every immediate subdirectory holding a history log."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a readable run directory")
    dirs = [root] if (root / "history.jsonl").exists() else sorted(p for p in root.iterdir() if (p / "history.jsonl").exists())
    runs = []
    for d in dirs:
        history = read_history(d / "history.jsonl")
        if not history:
            continue
        final = json.loads((d / EVAL_FILE).read_text()) if (d / EVAL_FILE).exists() else None
        runs.append(RunRecord(d.name, history, final))
    if not runs:
        raise FileNotFoundError(f"{root}: no run histories found")
    return runs


def class_table(runs: list[RunRecord]) -> str:
    """Per-class IoU, one column per run, classes in canonical order."""
    with_eval = [r for r in runs if r.final is not None]
    lines = []
    if with_eval:
        k = len(with_eval[0].final["iou"])
        names = with_eval[0].final.get("classes") or list(class_names(k))
        width = max(12, *(len(r.name) for r in with_eval))
        lines.append(f"{'class':<16}" + "".join(f"{r.name:>{width + 1}}" for r in with_eval))
        for i, name in enumerate(names):
            cells = []
            for r in with_eval:
                v = r.final["iou"][i]
                cells.append(f"{'n/a' if v is None else f'{100 * v:.1f}%':>{width + 1}}")
            lines.append(f"{name:<16}" + "".join(cells))
        for key, label in (("miou", "mIoU"), ("macc", "mAcc")):
            lines.append(f"{label:<16}" + "".join(f"{f'{100 * r.final[key]:.1f}%':>{width + 1}}" for r in with_eval))
        lines.append("")
    lines.append("final epoch summary")
    for r in runs:
        h = r.history[-1]
        miou = "n/a" if h.get("val_miou") is None else f"{100 * h['val_miou']:.1f}%"
        lines.append(f"  {r.name}: epoch {h['epoch']} loss {h['loss']:.4f} val mIoU {miou}")
    return "\n".join(lines) + "\n"


def curves_png(runs: list[RunRecord]) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_miou) = plt.subplots(1, 2, figsize=(11, 4))
    for r in runs:
        epochs = [h["epoch"] for h in r.history]
        ax_loss.plot(epochs, [h["loss"] for h in r.history], label=r.name)
        miou = [np.nan if h.get("val_miou") is None else 100 * h["val_miou"] for h in r.history]
        ax_miou.plot(epochs, miou, label=r.name)
    ax_loss.set(xlabel="epoch", ylabel="train loss", title="Training loss")
    ax_miou.set(xlabel="epoch", ylabel="val mIoU (%)", title="Validation mIoU")
    for ax in (ax_loss, ax_miou):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    buf = io.BytesIO()
    # fixed metadata keeps the image byte-stable across reruns
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def write_report(run_dir, out_dir=None) -> list[Path]:
    """Render ``curves.png`` and ``classes.txt``; nothing is written if the runs cannot be read."""
    runs = find_runs(run_dir)
    image, table = curves_png(runs), class_table(runs)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, payload in (("curves.png", image), ("classes.txt", table.encode())):
        tmp = out / (name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, out / name)
        written.append(out / name)
    return written
