"""Frequency-domain knowledge distillation between heterogeneous tiny backbones."""

from .config import DistillRecipe, ExperimentConfig, load_config
from .engine import TeacherCache, distill, pretrain_teacher, run_ablation_suite
from .models import PRESETS, build_model

__all__ = [
    "DistillRecipe",
    "ExperimentConfig",
    "PRESETS",
    "TeacherCache",
    "build_model",
    "distill",
    "load_config",
    "pretrain_teacher",
    "run_ablation_suite",
]
__version__ = "0.1.0"
