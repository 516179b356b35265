"""Parameter-space model merging, a two-stage anti-merging defense, and adaptive attacks."""

from .params import (AlignmentError, CheckpointError, MaskSet, ParamSet, TaskVector,
                     load_checkpoint, save_checkpoint, task_vector)
from .toymodels import ModelSpec, TrainConfig, evaluate, init_model, train
from .merging import MergeSpec, merge
from .defense import DefenseConfig, protect
from .attacks import AttackConfig, graderase_retrain, unmask

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "AttackConfig", "CheckpointError", "DefenseConfig", "MaskSet", "MergeSpec",
    "ModelSpec", "ParamSet", "TaskVector", "TrainConfig", "evaluate", "graderase_retrain",
    "init_model", "load_checkpoint", "merge", "protect", "save_checkpoint", "task_vector", "train",
    "unmask",
]
