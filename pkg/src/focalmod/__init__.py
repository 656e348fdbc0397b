"""Focal modulation image backbones implemented on numpy."""
from .accounting import CostReport, model_summary, modulation_cost, receptive_field
from .backbone import Model, ModelConfig, Variant, build_model, build_variant, model_forward, preset
from .estimator import FocalNetClassifier
from .exceptions import (
    ConfigError,
    DimensionError,
    FocalModError,
    GradCheckError,
    InputError,
    NonFiniteError,
    TrainingDivergence,
    UnsupportedError,
)
from .inspection import export_gating, export_kernels, export_modulator
from .modulation import Aggregator, FocalModConfig, FocalModulationParams, forward, init_params
from .tensor import PadMode, grad_check
from .trainer import SyntheticDataset, TrainConfig, adamw_step, gen_dataset, train

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "ConfigError", "CostReport", "DimensionError", "FocalModConfig", "FocalModError",
    "FocalModulationParams", "FocalNetClassifier", "GradCheckError", "InputError", "Model", "ModelConfig",
    "NonFiniteError", "PadMode", "SyntheticDataset", "TrainConfig", "TrainingDivergence", "UnsupportedError",
    "Variant", "adamw_step", "build_model", "build_variant", "export_gating", "export_kernels",
    "export_modulator", "forward", "gen_dataset", "grad_check", "init_params", "model_forward",
    "model_summary", "modulation_cost", "preset", "receptive_field", "train",
]
