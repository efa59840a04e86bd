"""spml-lab: robust losses and dynamic pseudo-labeling for single-positive
multi-label learning, with a synthetic spatial simulator for desk-scale
verification."""

from .core import (
    AnnotationVector,
    DampConfig,
    GprConfig,
    GroundTruthVector,
    PredictionBatch,
    PseudoLabelVector,
    SeedContext,
    ViewSpec,
    clamp_probability,
    derive_seed,
    mix_seed,
)
from .gpr_loss import (
    AlphaState,
    LossBreakdown,
    alpha_schedule,
    gpr_loss_batch,
    gr_loss_batch,
    method_confidence,
)
from .damp import generate_epoch, generate_pseudo_labels, partition_grid
from .scorers import MapScorer, SpatialScoreMap, load_score_map, save_score_map
from .trainer import SyntheticWorld, TrainSettings, Trainer, fit, simulate_world
from .evaluation import average_precision, mean_average_precision, pseudo_quality

__version__ = "0.1.0"

__all__ = [
    "AlphaState",
    "AnnotationVector",
    "DampConfig",
    "GprConfig",
    "GroundTruthVector",
    "LossBreakdown",
    "MapScorer",
    "PredictionBatch",
    "PseudoLabelVector",
    "SeedContext",
    "SpatialScoreMap",
    "SyntheticWorld",
    "TrainSettings",
    "Trainer",
    "ViewSpec",
    "alpha_schedule",
    "average_precision",
    "clamp_probability",
    "derive_seed",
    "fit",
    "generate_epoch",
    "generate_pseudo_labels",
    "gpr_loss_batch",
    "gr_loss_batch",
    "load_score_map",
    "mean_average_precision",
    "method_confidence",
    "mix_seed",
    "partition_grid",
    "pseudo_quality",
    "save_score_map",
    "simulate_world",
]
