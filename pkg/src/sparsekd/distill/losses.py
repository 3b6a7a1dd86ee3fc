"""Logit and feature-map distillation losses.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative of the
returned value with respect to the student-side input; teacher tensors are
constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..nn import Module, SparseConv
from ..sparse import SparseTensor

IGNORE_LABEL = 255


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 1.0
    lambda_dec: float = 0.0
    lambda_enc: float = 0.0
    t2_scaling: bool = True
    fm_softmax: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_dec < 0 or self.lambda_enc < 0:
            raise ValueError("feature-map loss weights must be non-negative")

    @property
    def uses_teacher(self) -> bool:
        return self.alpha < 1 or self.lambda_dec > 0 or self.lambda_enc > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def ce_loss(logits: np.ndarray, labels: np.ndarray, ignore_label: int = IGNORE_LABEL):
    """Mean softmax cross-entropy over rows whose label is not ``ignore_label``."""
    labels = np.asarray(labels)
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no supervised points")
    k = logits.shape[1]
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal {ignore_label}")
    rows = np.flatnonzero(valid)
    logp = log_softmax(logits[rows])
    loss = -logp[np.arange(n), labels[rows]].sum() / n
    grad = np.zeros_like(logits)
    g = np.exp(logp)
    g[np.arange(n), labels[rows]] -= 1
    grad[rows] = g / n
    return float(loss), grad


def kd_kl_loss(z: np.ndarray, v: np.ndarray, temperature: float, t2_scaling: bool = True):
    """Row-averaged ``KL(softmax(v/T) || softmax(z/T))`` with teacher logits ``v`` held fixed.

    Per row the gradient is ``(softmax(z/T) - softmax(v/T)) / T``; with
    ``t2_scaling`` both loss and gradient are multiplied by ``T**2``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.shape != v.shape:
        raise ValueError(f"student {z.shape} and teacher {v.shape} logits differ in shape")
    n = len(z)
    log_ps = log_softmax(z / temperature)
    log_pt = log_softmax(v / temperature)
    pt = np.exp(log_pt)
    loss = float((pt * (log_pt - log_ps)).sum()) / n
    grad = (np.exp(log_ps) - pt) / (temperature * n)
    if t2_scaling:
        scale = temperature**2
        loss *= scale
        grad *= scale
    return loss, grad


def ban_loss(z: np.ndarray, v: np.ndarray, labels: np.ndarray, cfg: DistillConfig, ignore_label: int = IGNORE_LABEL):
    """``alpha * CE + (1 - alpha) * KL``; returns ``(total, grad, ce, kl)``."""
    ce = kl = 0.0
    grad = np.zeros_like(z)
    if cfg.alpha > 0:
        ce, g = ce_loss(z, labels, ignore_label)
        grad = cfg.alpha * g
    if cfg.alpha < 1:
        kl, g = kd_kl_loss(z, v, cfg.temperature, cfg.t2_scaling)
        grad = grad + (1 - cfg.alpha) * g
    total = cfg.alpha * ce + (1 - cfg.alpha) * kl
    return total, grad, ce, kl


class ProjectionLayer(Module):
    """Trainable kernel-size-1 conv lifting student channels to teacher width."""

    def __init__(self, student_channels: int, teacher_channels: int, dim: int = 3, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv = SparseConv(student_channels, teacher_channels, 1, bias=True, dim=dim, rng=rng)

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: SparseTensor) -> SparseTensor:
        return self.conv.forward(x)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.conv.backward(g)


def feature_map_loss(student_tap: SparseTensor, teacher_tap: SparseTensor, proj: ProjectionLayer, fm_softmax: bool = False):
    """MSE between teacher features and projected (optionally softmaxed) student features.

    Returns ``(loss, grad_student_features)``; projection gradients are
    accumulated into ``proj``.
    """
    if student_tap.cmap is not teacher_tap.cmap and student_tap.cmap != teacher_tap.cmap:
        raise ValueError("tap alignment failure")
    if proj.in_channels != student_tap.features.shape[1]:
        raise ValueError(f"projection expects {proj.in_channels} student channels, got {student_tap.features.shape[1]}")
    if proj.out_channels != teacher_tap.features.shape[1]:
        raise ValueError(f"projection produces {proj.out_channels} channels, teacher has {teacher_tap.features.shape[1]}")
    s = student_tap.features
    sig = softmax(s, axis=1) if fm_softmax else s
    projected = proj.forward(student_tap.replace(sig)).features
    diff = projected - teacher_tap.features
    loss = float((diff * diff).mean())
    g = proj.backward(2.0 * diff / diff.size)
    if fm_softmax:
        g = sig * (g - (g * sig).sum(axis=1, keepdims=True))
    return loss, g
