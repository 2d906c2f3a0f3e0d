"""Smoke segmentation with transmission guidance and uncertainty maps."""

from ._smokelens import (
    CorruptDataset,
    InvalidArgument,
    InvalidCheckpoint,
    IoError,
    Model,
    avg_pool,
    calibrated_entropy_loss,
    coherence_loss,
    consistency_loss,
    dark_channel,
    decompose,
    ece,
    estimate_transmission,
    f_measure,
    generate_scene,
    guided_filter,
    kl_standard_normal,
    mean_prediction,
    min_filter,
    mse,
    structure_loss,
)

__all__ = [
    "CorruptDataset",
    "InvalidArgument",
    "InvalidCheckpoint",
    "IoError",
    "Model",
    "avg_pool",
    "calibrated_entropy_loss",
    "coherence_loss",
    "consistency_loss",
    "dark_channel",
    "decompose",
    "ece",
    "estimate_transmission",
    "f_measure",
    "generate_scene",
    "guided_filter",
    "kl_standard_normal",
    "mean_prediction",
    "min_filter",
    "mse",
    "structure_loss",
]
