from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..distill.losses import IGNORE_LABEL

SCANNET_CLASSES = (
    "bathtub", "bed", "bookshelf", "cabinet", "chair", "counter", "curtain", "desk", "door", "floor",
    "otherfurniture", "picture", "refrigerator", "shower_curtain", "sink", "sofa", "table", "toilet",
    "wall", "window",
)
SYNTHETIC_CLASSES = ("floor", "wall", "box", "cylinder", "sphere", "table")


def class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == len(SCANNET_CLASSES):
        return SCANNET_CLASSES
    if num_classes <= len(SYNTHETIC_CLASSES):
        return SYNTHETIC_CLASSES[:num_classes]
    return SYNTHETIC_CLASSES + tuple(f"class_{i}" for i in range(len(SYNTHETIC_CLASSES), num_classes))


class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), np.int64) if counts is None else np.asarray(counts, np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_label: int = IGNORE_LABEL) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
        keep = gt != ignore_label
        k = self.num_classes
        idx = gt[keep] * k + pred[keep]
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both ground truth and predictions."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def recall(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        support = self.counts.sum(1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, tp / support, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else 0.0

    def macc(self) -> float:
        rec = self.recall()
        return float(np.nanmean(rec)) if np.isfinite(rec).any() else 0.0


@dataclass
class EvalResult:
    miou: float
    macc: float
    iou: np.ndarray
    confusion: ConfusionMatrix

    def table(self, names=None) -> str:
        names = names or class_names(self.confusion.num_classes)
        lines = [f"{'class':<16} {'IoU':>7}", "-" * 24]
        for name, v in zip(names, self.iou):
            lines.append(f"{name:<16} {'   n/a' if np.isnan(v) else f'{100 * v:6.1f}%'}")
        lines.append("-" * 24)
        lines.append(f"{'mIoU':<16} {100 * self.miou:6.1f}%")
        lines.append(f"{'mAcc':<16} {100 * self.macc:6.1f}%")
        return "\n".join(lines)


def result_from_confusion(cm: ConfusionMatrix) -> EvalResult:
    return EvalResult(cm.miou(), cm.macc(), cm.iou(), cm)
