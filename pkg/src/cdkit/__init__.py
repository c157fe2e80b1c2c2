"""Semi-supervised bi-temporal change detection with consistency
regularization on the feature-difference map."""

from .data import (AugmentationConfig, BiTemporalSample, PairFolder, SplitManifest,
                   augment, extract_patches, load_pair, make_full_split, make_split)
from .losses import (LossReport, RampUpSchedule, consistency_loss, ramp_up,
                     supervised_loss, total_loss)
from .metrics import (ConfusionCounts, accumulate, binarize, iou_change,
                      overall_accuracy, write_report)
from .model import (ChangeDetectionNet, ChangeProbabilityMap, ModelConfig,
                    absolute_difference, build_model, model_config)
from .perturb import (PerturbationSpec, apply_all, content_object_masks, default_specs,
                      feature_drop, feature_noise, feature_vat, guided_cutout)
from .trainer import Batch, TrainConfig, Trainer, evaluate, fit, load_checkpoint

__all__ = [
    "AugmentationConfig", "Batch", "BiTemporalSample", "ChangeDetectionNet",
    "ChangeProbabilityMap", "ConfusionCounts", "LossReport", "ModelConfig",
    "PairFolder", "PerturbationSpec", "RampUpSchedule", "SplitManifest",
    "TrainConfig", "Trainer", "absolute_difference", "accumulate", "apply_all",
    "augment", "binarize", "build_model", "consistency_loss",
    "content_object_masks", "default_specs", "evaluate", "extract_patches",
    "feature_drop", "feature_noise", "feature_vat", "fit", "guided_cutout",
    "iou_change", "load_checkpoint", "load_pair", "make_full_split", "make_split",
    "model_config", "overall_accuracy", "ramp_up", "supervised_loss",
    "total_loss", "write_report",
]
