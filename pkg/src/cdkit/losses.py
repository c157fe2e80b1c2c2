"""Supervised CE loss, consistency loss over auxiliary predictions, and the
ramp-up weighting of the combined objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ValidationError
from .model import ChangeProbabilityMap


@dataclass
class RampUpSchedule:
    ramp_iters: int    # T: iterations over which the weight rises to 1
    total_iters: int

    def __post_init__(self):
        if self.ramp_iters < 1 or self.total_iters < 1:
            raise ValidationError("ramp_iters and total_iters must be positive")
        if self.ramp_iters > self.total_iters:
            raise ValidationError(
                f"ramp_iters ({self.ramp_iters}) exceeds total_iters ({self.total_iters})"
            )


@dataclass
class LossReport:
    sup: float
    unsup: float
    lam: float
    total: float

    def to_json(self) -> dict:
        return {"sup": self.sup, "unsup": self.unsup, "lambda": self.lam, "total": self.total}


def supervised_loss(y_hat: ChangeProbabilityMap, y: torch.Tensor) -> torch.Tensor:
    """Mean two-class cross-entropy of the prediction against a binary mask.

    Computed from logits (log-sum-exp inside F.cross_entropy), so it is stable
    for large logit magnitudes.
    """
    logits = y_hat.logits
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    target = y
    if target.dim() == 2:
        target = target.unsqueeze(0)
    if logits.shape[-2:] != target.shape[-2:] or logits.shape[0] != target.shape[0]:
        raise ValidationError(
            f"prediction {tuple(logits.shape)} incompatible with mask {tuple(target.shape)}"
        )
    return F.cross_entropy(logits, target.long())


def consistency_loss(aux_preds: Sequence[ChangeProbabilityMap],
                     y_hat: ChangeProbabilityMap) -> torch.Tensor:
    """Sum over auxiliary predictions of the MSE to the main probability map.

    The main prediction is treated as a constant target: no gradient reaches
    the main decoder through it.
    """
    if len(aux_preds) == 0:
        raise ValidationError("consistency_loss needs at least one auxiliary prediction")
    target = y_hat.probs.detach()
    loss = None
    for pred in aux_preds:
        if pred.probs.shape != target.shape:
            raise ValidationError(
                f"auxiliary prediction shape {tuple(pred.probs.shape)} "
                f"differs from main {tuple(target.shape)}"
            )
        term = F.mse_loss(pred.probs, target)
        loss = term if loss is None else loss + term
    return loss


def ramp_up(t: int, schedule: RampUpSchedule) -> float:
    """Gaussian ramp exp(-5 (1 - t/T)^2) on [0, T], constant 1 afterwards."""
    if t < 0:
        raise ValidationError(f"iteration index must be >= 0, got {t}")
    frac = min(t, schedule.ramp_iters) / schedule.ramp_iters
    return math.exp(-5.0 * (1.0 - frac) ** 2)


def total_loss(sup: float, unsup: float, lam: float) -> LossReport:
    if sup < 0 or unsup < 0:
        raise ValidationError("loss terms must be non-negative")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must be in [0, 1], got {lam}")
    return LossReport(sup=float(sup), unsup=float(unsup), lam=float(lam),
                      total=float(sup) + float(lam) * float(unsup))
