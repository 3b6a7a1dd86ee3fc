from .res16unet import (
    BASE_PLANES,
    BLOCK_COUNTS,
    ArchSpec,
    ParamCount,
    Res16UNet,
    TappedOutput,
    build_res16unet,
    forward_tapped,
    param_count,
    parse_arch,
)

__all__ = [
    "ArchSpec",
    "BASE_PLANES",
    "BLOCK_COUNTS",
    "ParamCount",
    "Res16UNet",
    "TappedOutput",
    "build_res16unet",
    "forward_tapped",
    "param_count",
    "parse_arch",
]
