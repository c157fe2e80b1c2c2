"""Feature-space perturbations applied to the feature-difference map.

All operations preserve the [C, h, w] (or [B, C, h, w]) shape of the input and
are deterministic under a fixed torch.Generator. Mask construction never
carries gradients; the perturbed output stays differentiable with respect to
the input map wherever the operation is a masking/additive transform.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ValidationError

PERTURBATION_KINDS = (
    "feature_noise",
    "feature_drop",
    "guided_cutout",
    "content_mask",
    "object_mask",
    "feature_vat",
)


@dataclass
class PerturbationSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValidationError(
                f"unknown perturbation kind {self.kind!r}; known: {PERTURBATION_KINDS}"
            )


def default_specs() -> list[PerturbationSpec]:
    """All six perturbations in canonical auxiliary-decoder order."""
    return [PerturbationSpec(kind) for kind in PERTURBATION_KINDS]


def parse_specs(entries) -> list[PerturbationSpec]:
    """Accept config entries as kind names or {kind, params} mappings."""
    specs = []
    for entry in entries:
        if isinstance(entry, str):
            specs.append(PerturbationSpec(entry))
        elif isinstance(entry, dict):
            specs.append(PerturbationSpec(entry["kind"], dict(entry.get("params", {}))))
        elif isinstance(entry, PerturbationSpec):
            specs.append(entry)
        else:
            raise ValidationError(f"cannot parse perturbation spec {entry!r}")
    return specs


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValidationError(f"expected [C,h,w] or [B,C,h,w] feature map, got {tuple(x.shape)}")


def _probs_of(y_hat) -> torch.Tensor:
    probs = getattr(y_hat, "probs", y_hat)
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    return probs


def _uniform(shape, lo, hi, rng, dtype):
    return lo + (hi - lo) * torch.rand(shape, generator=rng, dtype=dtype)


def prediction_change_mask(y_hat, size) -> torch.Tensor:
    """{0,1} change mask from a prediction, downsampled to the feature grid.

    A feature cell counts as change if any pixel in its receptive block has
    change probability >= 0.5.
    """
    probs = _probs_of(y_hat)
    change = (probs[:, 1:2] >= 0.5).float()
    return F.adaptive_max_pool2d(change, size)


# ---------------------------------------------------------------------------
# the five perturbation families
# ---------------------------------------------------------------------------

def feature_noise(f_d: torch.Tensor, rng: torch.Generator,
                  low: float = -0.3, high: float = 0.3) -> torch.Tensor:
    """f_d + N * f_d with N ~ U(low, high) i.i.d. per element."""
    x, squeeze = _batched(f_d)
    noise = _uniform(x.shape, low, high, rng, x.dtype)
    out = x + noise * x
    return out.squeeze(0) if squeeze else out


def feature_drop(f_d: torch.Tensor, rng: torch.Generator,
                 gamma_low: float = 0.6, gamma_high: float = 0.9) -> torch.Tensor:
    """Zero the highest-magnitude spatial cells of the map.

    The channel-mean magnitude map is min-max normalized to [0,1]; cells at or
    above a threshold gamma ~ U(gamma_low, gamma_high) are dropped across all
    channels.
    """
    x, squeeze = _batched(f_d)
    with torch.no_grad():
        magnitude = x.abs().mean(dim=1, keepdim=True)  # [B,1,h,w]
        flat = magnitude.flatten(1)
        lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
        hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
        span = hi - lo
        if (span == 0).any():
            warnings.warn("feature_drop: constant feature map, returning input unchanged")
            return f_d
        normalized = (magnitude - lo) / span
        gamma = _uniform((x.shape[0], 1, 1, 1), gamma_low, gamma_high, rng, x.dtype)
        mask = (normalized < gamma).to(x.dtype)
    out = x * mask
    return out.squeeze(0) if squeeze else out


def _sample_cutout_box(change_mask: torch.Tensor, rng: torch.Generator,
                       side_low: float = 0.25, side_high: float = 0.5):
    """Choose one cutout rectangle for a single [h,w] change mask.

    Returns the (y0, y1, x0, x1) box clipped to bounds, the unclipped side
    lengths, and the chosen center cell. The realized side lengths are clamped
    so the unclipped area stays within [side_low^2, side_high^2] of the grid.
    """
    h, w = change_mask.shape
    sides = []
    for dim in (h, w):
        u = float(_uniform((), side_low, side_high, rng, torch.float32))
        lo = max(1, math.ceil(side_low * dim))
        hi = max(lo, math.floor(side_high * dim))
        sides.append(min(max(int(round(u * dim)), lo), hi))
    side_h, side_w = sides
    change_cells = change_mask.nonzero()
    if len(change_cells) > 0:
        pick = int(torch.randint(len(change_cells), (1,), generator=rng))
        cy, cx = (int(v) for v in change_cells[pick])
    else:
        cy = int(torch.randint(h, (1,), generator=rng))
        cx = int(torch.randint(w, (1,), generator=rng))
    y0 = cy - side_h // 2
    x0 = cx - side_w // 2
    box = (max(0, y0), min(h, y0 + side_h), max(0, x0), min(w, x0 + side_w))
    return box, (side_h, side_w), (cy, cx)


def guided_cutout(f_d: torch.Tensor, y_hat, rng: torch.Generator,
                  side_low: float = 0.25, side_high: float = 0.5) -> torch.Tensor:
    """Zero a random rectangle centered on a predicted-change cell.

    Falls back to a uniformly random center when the prediction contains no
    change.
    """
    x, squeeze = _batched(f_d)
    with torch.no_grad():
        change = prediction_change_mask(y_hat, x.shape[-2:])
        keep = torch.ones_like(x[:, :1])
        for i in range(x.shape[0]):
            (y0, y1, x0, x1), _, _ = _sample_cutout_box(change[i, 0], rng, side_low, side_high)
            keep[i, :, y0:y1, x0:x1] = 0.0
    out = x * keep
    return out.squeeze(0) if squeeze else out


def content_object_masks(f_d: torch.Tensor, y_hat):
    """The two complementary masked views of the map.

    First output: predicted-change cells zeroed (the surrounding content is
    kept); second output: predicted-no-change cells zeroed (the changed object
    is kept). The two outputs sum to the input.
    """
    x, squeeze = _batched(f_d)
    with torch.no_grad():
        change = prediction_change_mask(y_hat, x.shape[-2:]).to(x.dtype)
    content_view = x * (1.0 - change)
    object_view = x * change
    if squeeze:
        return content_view.squeeze(0), object_view.squeeze(0)
    return content_view, object_view


def feature_vat(f_d: torch.Tensor, decode_fn, y_hat, xi: float = 1e-6,
                eps: float = 2.0, iterations: int = 1,
                rng: torch.Generator | None = None) -> torch.Tensor:
    """Adversarial additive perturbation estimated by power iteration.

    The direction that most changes the decoded probability map (MSE distance)
    is found by differentiating through `decode_fn`; the returned map is
    f_d + eps * direction with the direction treated as a constant.
    """
    x, squeeze = _batched(f_d)
    ref = _probs_of(y_hat).detach()
    base = x.detach()

    def normalize(d):
        norm = d.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
        return d / norm.clamp_min(1e-12)

    d = normalize(torch.randn(base.shape, generator=rng, dtype=base.dtype))
    with torch.enable_grad():
        for _ in range(iterations):
            r = (xi * d).requires_grad_(True)
            pert = _probs_of(decode_fn(base + r))
            dist = F.mse_loss(pert, ref)
            grad = (torch.autograd.grad(dist, r, allow_unused=True)[0]
                    if dist.grad_fn is not None else None)
            if grad is None:
                warnings.warn("feature_vat: zero gradient, keeping the random direction")
                break
            grad_norm = grad.flatten(1).norm(dim=1)
            if (grad_norm < 1e-12).any():
                warnings.warn("feature_vat: zero gradient, keeping the random direction")
                zero = (grad_norm < 1e-12).view(-1, 1, 1, 1)
                grad = torch.where(zero, d, grad)
            d = normalize(grad)
    p_adv = (eps * d).detach()
    out = x + p_adv
    return out.squeeze(0) if squeeze else out


def apply_all(f_d: torch.Tensor, y_hat, specs: list[PerturbationSpec],
              rng: torch.Generator, decode_fn=None) -> list[torch.Tensor]:
    """One perturbed map per spec, in spec order (= auxiliary decoder order)."""
    if not specs:
        raise ValidationError("apply_all requires at least one perturbation spec")
    mask_pair = None
    outputs = []
    for spec in specs:
        if spec.kind == "feature_noise":
            outputs.append(feature_noise(f_d, rng, **spec.params))
        elif spec.kind == "feature_drop":
            outputs.append(feature_drop(f_d, rng, **spec.params))
        elif spec.kind == "guided_cutout":
            outputs.append(guided_cutout(f_d, y_hat, rng, **spec.params))
        elif spec.kind in ("content_mask", "object_mask"):
            if mask_pair is None:
                mask_pair = content_object_masks(f_d, y_hat)
            outputs.append(mask_pair[0] if spec.kind == "content_mask" else mask_pair[1])
        elif spec.kind == "feature_vat":
            if decode_fn is None:
                raise ValidationError("feature_vat requires a decode_fn")
            outputs.append(feature_vat(f_d, decode_fn, y_hat, rng=rng, **spec.params))
    return outputs
