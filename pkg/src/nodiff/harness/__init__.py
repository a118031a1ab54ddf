"""Datasets, training, evaluation and table runners."""

from .config import TrainConfig, config_from_dict, load_config
from .data import TrainingSet, build_training_set, build_windows, fit_norm_stats
from .train import FitResult, fit

__all__ = [
    "TrainConfig",
    "config_from_dict",
    "load_config",
    "TrainingSet",
    "build_training_set",
    "build_windows",
    "fit_norm_stats",
    "FitResult",
    "fit",
]
