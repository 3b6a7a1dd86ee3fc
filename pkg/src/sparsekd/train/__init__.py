from .checkpoint import Checkpoint, CheckpointError, decode, encode, load_checkpoint, load_into_network, save_checkpoint
from .loop import (
    SUPERVISED,
    DataConfig,
    TeacherCache,
    TrainResult,
    evaluate,
    export_model,
    fit,
    read_history,
    train_distill,
    train_supervised,
)
from .metrics import SCANNET_CLASSES, SYNTHETIC_CLASSES, ConfusionMatrix, EvalResult, class_names, result_from_confusion
from .optim import DivergenceError, OptimConfig, Optimizer, step_lr

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfusionMatrix",
    "DataConfig",
    "DivergenceError",
    "EvalResult",
    "OptimConfig",
    "Optimizer",
    "SCANNET_CLASSES",
    "SUPERVISED",
    "SYNTHETIC_CLASSES",
    "TeacherCache",
    "TrainResult",
    "class_names",
    "decode",
    "encode",
    "evaluate",
    "export_model",
    "fit",
    "load_checkpoint",
    "load_into_network",
    "read_history",
    "result_from_confusion",
    "save_checkpoint",
    "step_lr",
    "train_distill",
    "train_supervised",
]
