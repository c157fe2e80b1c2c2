"""Pixel-level change detection metrics: change-class IoU and overall accuracy.

Counts are accumulated globally over a dataset (not averaged per image), so
results do not depend on how pixels are batched.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError


@dataclass
class ConfusionCounts:
    """Accumulated pixel counts; change is the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def binarize(y_hat, threshold: float) -> np.ndarray:
    """Threshold a prediction into a {0,1} change mask.

    `y_hat` is either a ChangeProbabilityMap or an array of change-class
    probabilities of shape [..., H, W]. A pixel is marked changed when its
    change probability is >= threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    change_prob = getattr(y_hat, "probs", None)
    if change_prob is not None:
        change_prob = _as_numpy(change_prob)
        # class axis is the one of size 2 right before the two spatial dims
        change_prob = change_prob[..., 1, :, :]
    else:
        change_prob = _as_numpy(y_hat)
    return (change_prob >= threshold).astype(np.uint8)


def accumulate(pred, gt, counts: ConfusionCounts) -> ConfusionCounts:
    """Add the per-pixel agreement tallies of one (pred, gt) pair to counts."""
    pred = _as_numpy(pred)
    gt = _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    batch = ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
    )
    return counts + batch


def iou_change(counts: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); defined as 1.0 when no positives exist anywhere."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return counts.tp / denom


def overall_accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise ValidationError("overall_accuracy of empty counts is undefined")
    return (counts.tp + counts.tn) / counts.total


def write_report(counts: ConfusionCounts, threshold: float, path) -> dict:
    """Emit the metrics JSON report and return it as a dict."""
    report = {
        "iou_change": iou_change(counts),
        "overall_accuracy": overall_accuracy(counts),
        **asdict(counts),
        "threshold": threshold,
    }
    Path(path).write_text(json.dumps(report, indent=2))
    return report
