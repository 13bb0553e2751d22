"""Class-specific attention supervision for imbalanced image classification.

Trains a CNN in two stages: plain classification pretraining, then
finetuning with an attention loss that keeps each image's class-evidence
map inside its annotated boxes. Includes gradient-based activation maps,
automated box generation from probability maps, a synthetic imbalanced
benchmark, metrics and a CLI (``care --help``).
"""

from .annotations import AnnotationRecord, BoundingBox, MaskPair, build_masks, load_annotations, save_annotations
from .backbone import BackboneConfig, ImageBatch, ReferenceCNN, load_checkpoint, save_checkpoint
from .bbox_autogen import ProbabilityMap, boxes_from_probability_map, stub_saliency
from .cam import ActivationMap, cam_for_true_class, true_class_cams
from .data import ImageDataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .losses import LossBreakdown, LossConfig, total_loss
from .metrics import MetricsReport, PredictionSet, build_report
from .pipeline import TrainConfig, evaluate_checkpoint, finetune_care, predict, pretrain, sweep

__version__ = "0.1.0"

__all__ = [
    "ActivationMap",
    "AnnotationRecord",
    "BackboneConfig",
    "BoundingBox",
    "ImageBatch",
    "ImageDataset",
    "LossBreakdown",
    "LossConfig",
    "MaskPair",
    "MetricsReport",
    "PredictionSet",
    "ProbabilityMap",
    "ReferenceCNN",
    "SyntheticSpec",
    "TrainConfig",
    "boxes_from_probability_map",
    "build_masks",
    "build_report",
    "cam_for_true_class",
    "evaluate_checkpoint",
    "finetune_care",
    "generate_synthetic",
    "load_annotations",
    "load_checkpoint",
    "load_dataset",
    "predict",
    "pretrain",
    "save_annotations",
    "save_checkpoint",
    "save_dataset",
    "stub_saliency",
    "sweep",
    "total_loss",
    "true_class_cams",
    "__version__",
]
