"""Seedable simulator of single-layer bag grasping by interactive perception."""
from .bagsim import MATERIALS, BagState, Layers, Material, MaterialKind, new_bag
from .config import ConfigError, SimConfig, apply_overrides
from .harness import ExperimentConfig, run_experiment
from .policy import EpisodeResult, FailureTag, run_episode
from .slip import ClassifierModel, SlipParams, SlipResult, run_slip

__version__ = "0.1.0"

__all__ = [
    "BagState", "ClassifierModel", "ConfigError", "EpisodeResult", "ExperimentConfig", "FailureTag", "Layers",
    "MATERIALS", "Material", "MaterialKind", "SimConfig", "SlipParams", "SlipResult",
    "apply_overrides", "new_bag", "run_episode", "run_experiment", "run_slip",
]
