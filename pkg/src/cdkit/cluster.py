"""Local-density diagnostics for the change/no-change decision boundary.

Two density maps are produced: one over non-overlapping 15x15 patches of the
6-channel pre/post composite image, and one over the spatial grid of the
feature-difference map. High values mark locations whose local neighborhood
varies strongly; for a usable representation these should concentrate around
true change boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .data import BiTemporalSample
from .errors import ValidationError

IMAGE_PATCH = 15
FEATURE_STRIDE = 4


@dataclass
class DensityMap:
    values: np.ndarray      # [h, w], non-negative
    domain: str             # "image" or "feature"
    cell_size: int          # pixels represented per cell


def _neighbor_mean_distance(vectors: np.ndarray, squared: bool) -> np.ndarray:
    """Mean distance from each grid cell's vector to its up-to-8 neighbors.

    `vectors` is [h, w, dim]; edge cells average over the neighbors that
    exist.
    """
    h, w, _ = vectors.shape
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            count = 0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ni, nj = i + di, j + dj
                    if 0 <= ni < h and 0 <= nj < w:
                        diff = vectors[i, j] - vectors[ni, nj]
                        d2 = float(np.dot(diff, diff))
                        acc += d2 if squared else np.sqrt(d2)
                        count += 1
            out[i, j] = acc / count
    return out


def image_domain_density(sample: BiTemporalSample) -> DensityMap:
    """Mean L2 distance between each 15x15 composite patch and its neighbors.

    The composite stacks the pre and post images along channels (6 channels in
    [0,1]); the grid is the non-overlapping 15x15 tiling, partial border tiles
    discarded.
    """
    h, w = sample.size
    gh, gw = h // IMAGE_PATCH, w // IMAGE_PATCH
    if gh < 3 or gw < 3:
        raise ValidationError(
            f"image {h}x{w} too small for a 3x3 grid of {IMAGE_PATCH}px patches"
        )
    composite = torch.cat([sample.image_a, sample.image_b], dim=0).numpy()
    composite = composite[:, :gh * IMAGE_PATCH, :gw * IMAGE_PATCH]
    # [6, gh, 15, gw, 15] -> [gh, gw, 6*15*15]
    patches = composite.reshape(6, gh, IMAGE_PATCH, gw, IMAGE_PATCH)
    vectors = patches.transpose(1, 3, 0, 2, 4).reshape(gh, gw, -1)
    values = _neighbor_mean_distance(vectors, squared=False)
    return DensityMap(values=values, domain="image", cell_size=IMAGE_PATCH)


def feature_domain_density(f_d: torch.Tensor) -> DensityMap:
    """Mean squared L2 distance between each feature vector and its neighbors."""
    if f_d.dim() != 3:
        raise ValidationError(f"expected a [C,h,w] feature map, got {tuple(f_d.shape)}")
    _, h, w = f_d.shape
    if h < 3 or w < 3:
        raise ValidationError(f"feature map {h}x{w} too small for a 3x3 neighborhood")
    vectors = f_d.detach().cpu().numpy().transpose(1, 2, 0)
    values = _neighbor_mean_distance(vectors, squared=True)
    return DensityMap(values=values, domain="feature", cell_size=FEATURE_STRIDE)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """4-connected inner boundary: change pixels adjacent to a no-change pixel."""
    mask = np.asarray(mask).astype(bool)
    boundary = np.zeros_like(mask)
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= ni < h and 0 <= nj < w and not mask[ni, nj]:
                    boundary[i, j] = True
                    break
    return boundary


def render_density(density: DensityMap, gt: Optional[np.ndarray] = None,
                   out_path=None) -> np.ndarray:
    """Min-max normalized blue-to-red rendering, upsampled to pixel scale.

    When a ground-truth mask is given, its 4-connected class boundary is drawn
    in black. Returns the uint8 RGB array; writes a PNG when out_path is set.
    """
    values = density.values
    span = values.max() - values.min()
    norm = (values - values.min()) / span if span > 0 else np.zeros_like(values)
    rgb = np.zeros(values.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.round(255.0 * norm)         # red rises with density
    rgb[..., 2] = np.round(255.0 * (1.0 - norm)) # blue falls
    rgb = np.kron(rgb, np.ones((density.cell_size, density.cell_size, 1), dtype=np.uint8))
    if gt is not None:
        gt = np.asarray(gt)
        h, w = rgb.shape[:2]
        boundary = mask_boundary(gt[:h, :w])
        rgb[boundary] = 0
    if out_path is not None:
        Image.fromarray(rgb).save(Path(out_path))
    return rgb
