from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import Res16UNet, TappedOutput
from .losses import IGNORE_LABEL, DistillConfig, ProjectionLayer, ban_loss, feature_map_loss


@dataclass
class LossTerms:
    total: float
    ce: float
    kl: float
    dec_fm: float
    enc_fm: float

    def as_dict(self) -> dict:
        return {"loss": self.total, "ce": self.ce, "kl": self.kl, "dec_fm": self.dec_fm, "enc_fm": self.enc_fm}


@dataclass
class DistillGrads:
    logits: np.ndarray
    encoder: np.ndarray | None
    decoder: np.ndarray | None


def total_distill_loss(
    student: TappedOutput,
    teacher: TappedOutput | None,
    labels: np.ndarray,
    cfg: DistillConfig,
    proj_enc: ProjectionLayer | None = None,
    proj_dec: ProjectionLayer | None = None,
    ignore_label: int = IGNORE_LABEL,
) -> tuple[LossTerms, DistillGrads]:
    """L_BAN plus weighted decoder/encoder feature-map terms.

    Feature-map terms with zero weight are skipped entirely (no projection
    forward, no gradient). ``teacher`` may be ``None`` only when ``cfg``
    does not use it.
    """
    z = student.logits.features
    if teacher is None:
        if cfg.uses_teacher:
            raise ValueError("configuration needs teacher outputs")
        v = z
    else:
        v = teacher.logits.features
        if len(v) != len(z):
            raise ValueError("tap alignment failure")
    total, g_logits, ce, kl = ban_loss(z, v, labels, cfg, ignore_label)
    dec_fm = enc_fm = 0.0
    g_dec = g_enc = None
    if cfg.lambda_dec > 0:
        dec_fm, g = feature_map_loss(student.decoder_tap, teacher.decoder_tap, proj_dec, cfg.fm_softmax)
        g_dec = cfg.lambda_dec * g
        total += cfg.lambda_dec * dec_fm
    if cfg.lambda_enc > 0:
        enc_fm, g = feature_map_loss(student.encoder_tap, teacher.encoder_tap, proj_enc, cfg.fm_softmax)
        g_enc = cfg.lambda_enc * g
        total += cfg.lambda_enc * enc_fm
    return LossTerms(total, ce, kl, dec_fm, enc_fm), DistillGrads(g_logits, g_enc, g_dec)


def make_projections(student: Res16UNet, teacher: Res16UNet, seed: int = 0) -> tuple[ProjectionLayer, ProjectionLayer]:
    """Encoder (bottleneck) and decoder projections from student to teacher width."""
    s, t = student.spec.planes, teacher.spec.planes
    dim = student.spec.dims
    return ProjectionLayer(s[3], t[3], dim, seed), ProjectionLayer(s[7], t[7], dim, seed + 1)


def distill_step(
    student: Res16UNet,
    teacher: Res16UNet,
    x,
    labels: np.ndarray,
    cfg: DistillConfig,
    proj_enc: ProjectionLayer,
    proj_dec: ProjectionLayer,
    teacher_out: TappedOutput | None = None,
) -> LossTerms:
    """One forward/backward of the student against a frozen teacher.

    The teacher runs in eval mode and never receives gradients; pass
    ``teacher_out`` to reuse precomputed teacher outputs for the same input.
    """
    student.train()
    s_out = student.forward_tapped(x)
    if teacher_out is None and cfg.uses_teacher:
        teacher.eval()
        teacher_out = teacher.forward_tapped(x)
    terms, grads = total_distill_loss(s_out, teacher_out, labels, cfg, proj_enc, proj_dec)
    student.backward(grads.logits, grads.encoder, grads.decoder)
    return terms
