from .gradcheck import GradcheckReport, gradcheck, scattered_sites
from .layers import (
    BatchNorm,
    Linear,
    ReLU,
    SparseConv,
    SparseConvTranspose,
    concat,
    conv_backward,
    conv_forward,
    relu,
    residual_add,
)
from .module import Module, Parameter

__all__ = [
    "BatchNorm",
    "GradcheckReport",
    "Linear",
    "Module",
    "Parameter",
    "ReLU",
    "SparseConv",
    "SparseConvTranspose",
    "concat",
    "conv_backward",
    "conv_forward",
    "gradcheck",
    "relu",
    "residual_add",
    "scattered_sites",
]
