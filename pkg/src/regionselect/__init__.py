"""Interpretable classification through sparse, instance-wise region selection."""

from .exceptions import ConfigError, NumericalError
from .regions import (
    RegionPartition,
    aggregate_region_mean,
    broadcast_to_pixels,
    enforce_connectivity,
    slic_partition,
)
from .selector import (
    MaskDistribution,
    MaskedImage,
    RegionMask,
    SelectorNetwork,
    apply_mask,
    binarize_gumbel,
    build_distribution,
    deterministic_binarize,
    sample_probabilities,
)
from .objective import LossBreakdown, TrainSchedule, anneal, covariance_penalty, \
    expected_pixel_fraction, sample_tau, sparsity_loss, total_loss
from .classifier import ClassifierNetwork, TrainState, classify, train_epoch
from .inference import Explanation, ThresholdPolicy, dynamic_threshold, predict_fixed
from .evaluation import (
    EvalReport,
    FidelityCurve,
    deletion_fidelity,
    evaluate,
    evenly_spaced_mask,
    insertion_fidelity,
    localization,
    pixel_importance,
    random_region_mask,
)
from .synthdata import LabeledInstance, SyntheticDataset, SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NumericalError",
    "RegionPartition",
    "slic_partition",
    "enforce_connectivity",
    "aggregate_region_mean",
    "broadcast_to_pixels",
    "SelectorNetwork",
    "MaskDistribution",
    "RegionMask",
    "MaskedImage",
    "build_distribution",
    "sample_probabilities",
    "binarize_gumbel",
    "deterministic_binarize",
    "apply_mask",
    "TrainSchedule",
    "LossBreakdown",
    "expected_pixel_fraction",
    "sparsity_loss",
    "covariance_penalty",
    "total_loss",
    "sample_tau",
    "anneal",
    "ClassifierNetwork",
    "TrainState",
    "classify",
    "train_epoch",
    "ThresholdPolicy",
    "Explanation",
    "dynamic_threshold",
    "predict_fixed",
    "EvalReport",
    "FidelityCurve",
    "localization",
    "pixel_importance",
    "insertion_fidelity",
    "deletion_fidelity",
    "evenly_spaced_mask",
    "random_region_mask",
    "evaluate",
    "SyntheticSpec",
    "SyntheticDataset",
    "LabeledInstance",
    "generate",
    "__version__",
]
