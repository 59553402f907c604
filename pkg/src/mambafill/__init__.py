"""Diffusion-based imputation of multivariate sensor series whose temporal
core is a bidirectional selective state-space block, plus the desk-scale
benchmark harnesses around it."""

from .autodiff import Context, Module, Parameter, Tape, Tensor
from .diffusion import DiffusionSchedule, masked_loss, quadratic_schedule
from .graph import GraphSpec, build_adjacency
from .masking import MaskPair, scenario_masks
from .model import ConditioningBundle, ModelConfig, NoisePredictor
from .pipeline import (ImputationResult, Metrics, TrainConfig, WindowSet,
                       impute, linear_interpolate, metrics, train)
from .synth import SyntheticSpec, generate_synthetic

__all__ = [
    "Context", "Module", "Parameter", "Tape", "Tensor",
    "DiffusionSchedule", "masked_loss", "quadratic_schedule",
    "GraphSpec", "build_adjacency",
    "MaskPair", "scenario_masks",
    "ConditioningBundle", "ModelConfig", "NoisePredictor",
    "ImputationResult", "Metrics", "TrainConfig", "WindowSet",
    "impute", "linear_interpolate", "metrics", "train",
    "SyntheticSpec", "generate_synthetic",
]

__version__ = "0.1.0"
