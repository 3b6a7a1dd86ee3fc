from .losses import (
    IGNORE_LABEL,
    DistillConfig,
    ProjectionLayer,
    ban_loss,
    ce_loss,
    feature_map_loss,
    kd_kl_loss,
    log_softmax,
    softmax,
)
from .step import DistillGrads, LossTerms, distill_step, make_projections, total_distill_loss

__all__ = [
    "DistillConfig",
    "DistillGrads",
    "IGNORE_LABEL",
    "LossTerms",
    "ProjectionLayer",
    "ban_loss",
    "ce_loss",
    "distill_step",
    "feature_map_loss",
    "kd_kl_loss",
    "log_softmax",
    "make_projections",
    "softmax",
    "total_distill_loss",
]
