"""Coarse-to-fine localization and classification of lumbar spine objects.

A small reverse-mode autodiff engine (:mod:`ccfnet.tensor`) drives a
stride-16 residual encoder with a multi-scale context stage
(:mod:`ccfnet.network`). Each of the 11 objects is predicted as a coarse
heatmap, two offset maps and a disease-probability map
(:mod:`ccfnet.codec`), trained with a masked multi-term loss
(:mod:`ccfnet.loss`) and scored by recall within 6 mm and AUC at true
points (:mod:`ccfnet.metrics`).
"""

from .codec import (
    NUM_OBJECTS,
    OBJECT_IDS,
    GridSpec,
    SpineAnnotation,
    decode_arrays,
    decode_predictions,
    encode_targets,
)
from .config import RunConfig, load_config
from .io import load_checkpoint, read_dataset, save_checkpoint, write_sample
from .loss import LossWeights, total_loss
from .metrics import MetricsReport, aggregate_folds, auc, evaluate, overall_score
from .network import CCFNet, EncoderConfig, MSCConfig, build_network, count_params_flops
from .synth import AugmentPolicy, SynthConfig, augment, generate_dataset, generate_sample, kfold_split
from .tensor import Tensor, backward, no_grad
from .training import AdamWConfig, LrSchedule, TrainConfig, adamw_step, evaluate_samples, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "AdamWConfig",
    "AugmentPolicy",
    "CCFNet",
    "EncoderConfig",
    "GridSpec",
    "LossWeights",
    "LrSchedule",
    "MSCConfig",
    "MetricsReport",
    "NUM_OBJECTS",
    "OBJECT_IDS",
    "RunConfig",
    "SpineAnnotation",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "adamw_step",
    "aggregate_folds",
    "auc",
    "augment",
    "backward",
    "build_network",
    "count_params_flops",
    "decode_arrays",
    "decode_predictions",
    "encode_targets",
    "evaluate",
    "evaluate_samples",
    "generate_dataset",
    "generate_sample",
    "kfold_split",
    "load_checkpoint",
    "load_config",
    "lr_at",
    "no_grad",
    "overall_score",
    "read_dataset",
    "save_checkpoint",
    "total_loss",
    "train",
    "write_sample",
]
