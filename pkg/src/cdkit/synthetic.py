"""Synthetic bi-temporal corpora for desk-scale experiments.

Each pair is a smooth textured background; the post image adds a few bright
rectangles (the change) and a global brightness shift (irrelevant change that
a detector must learn to ignore).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import BiTemporalSample


def make_toy_pair(rng: np.random.Generator, size: int = 64, id: str = "toy",
                  n_rect_range: tuple[int, int] = (1, 3),
                  rect_side_range: tuple[int, int] = (10, 24),
                  rect_contrast: tuple[float, float] = (0.15, 0.3),
                  brightness_jitter: float = 0.18) -> BiTemporalSample:
    """One synthetic pair with inserted bright rectangles as the change.

    The rectangle contrast overlaps the brightness-jitter range, so per-pixel
    differencing alone cannot separate real changes from the global shift.
    """
    coarse = rng.uniform(0.25, 0.6, size=(8, 8)).astype(np.float32)
    background = torch.from_numpy(coarse)[None, None]
    background = torch.nn.functional.interpolate(
        background, size=(size, size), mode="bilinear", align_corners=False)[0, 0]
    texture = torch.from_numpy(rng.normal(0.0, 0.02, size=(size, size)).astype(np.float32))
    base = (background + texture).clamp(0.05, 0.9)
    image_a = base.unsqueeze(0).repeat(3, 1, 1).clone()

    image_b = image_a.clone()
    mask = torch.zeros(size, size)
    for _ in range(int(rng.integers(n_rect_range[0], n_rect_range[1] + 1))):
        rh = int(rng.integers(rect_side_range[0], rect_side_range[1] + 1))
        rw = int(rng.integers(rect_side_range[0], rect_side_range[1] + 1))
        top = int(rng.integers(0, size - rh + 1))
        left = int(rng.integers(0, size - rw + 1))
        region = image_b[:, top:top + rh, left:left + rw]
        value = region.mean() + float(rng.uniform(*rect_contrast))
        image_b[:, top:top + rh, left:left + rw] = min(float(value), 1.0)
        mask[top:top + rh, left:left + rw] = 1.0

    shift = float(rng.uniform(-brightness_jitter, brightness_jitter))
    image_b = (image_b + shift).clamp(0.0, 1.0)

    return BiTemporalSample(image_a=image_a.clamp(0, 1), image_b=image_b,
                            mask=mask, id=id)


def make_toy_corpus(n: int = 200, size: int = 64, seed: int = 0, **kwargs) -> list[BiTemporalSample]:
    rng = np.random.default_rng(seed)
    return [make_toy_pair(rng, size=size, id=f"toy{i:04d}", **kwargs) for i in range(n)]


def _to_png(tensor: torch.Tensor) -> Image.Image:
    arr = (tensor.numpy() * 255.0).round().astype(np.uint8)
    if arr.ndim == 3:
        return Image.fromarray(arr.transpose(1, 2, 0))
    return Image.fromarray(arr)


def write_corpus(samples: list[BiTemporalSample], root) -> Path:
    """Write samples to disk in the A/B/label dataset layout."""
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        _to_png(s.image_a).save(root / "A" / f"{s.id}.png")
        _to_png(s.image_b).save(root / "B" / f"{s.id}.png")
        if s.mask is not None:
            _to_png(s.mask).save(root / "label" / f"{s.id}.png")
    return root
