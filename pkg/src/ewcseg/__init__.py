"""Continual-learning benchmark: EWC fine-tuning of a valid-convolution
3D UNet across a synthetic tumor-segmentation domain shift."""

from .tensor import Precision, Tape, Tensor, backward
from .model import ArchitectureConfig, ModelParameters, architecture_preset, build_model, context_margin, forward, valid_input_extents
from .ewc import ConsolidationState, FisherDiagonal, estimate_fisher_diagonal, penalty_and_gradient
from .data import DomainSpec, PatchSpec, VolumeSample, desk_specs, generate_domain, make_splits, normalize_volume, sample_patch
from .training import OptimizerConfig, SchemeConfig, run_scheme, train_phase
from .evaluation import SchemeReport, dice, emit_results_table, evaluate_model, tiled_predict
from .reproduce import reproduce

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "ConsolidationState", "DomainSpec", "FisherDiagonal",
    "ModelParameters", "OptimizerConfig", "PatchSpec", "Precision", "SchemeConfig",
    "SchemeReport", "Tape", "Tensor", "VolumeSample", "architecture_preset",
    "backward", "build_model", "context_margin", "desk_specs", "dice",
    "emit_results_table", "estimate_fisher_diagonal", "evaluate_model", "forward",
    "generate_domain", "make_splits", "normalize_volume", "penalty_and_gradient",
    "reproduce", "run_scheme", "sample_patch", "tiled_predict", "train_phase",
    "valid_input_extents",
]
