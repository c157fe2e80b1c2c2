"""Bi-temporal pair loading, patch tiling, split generation, and augmentation.

Dataset directory layout::

    <root>/A/<id>.png       pre-change image (8-bit RGB)
    <root>/B/<id>.png       post-change image
    <root>/label/<id>.png   optional single-channel change label (nonzero = change)

Split manifests are plain text files (one id per line) named labeled.txt,
unlabeled.txt, val.txt, test.txt, plus a split.json recording the fraction and
seed they were generated with.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError, ValidationError


@dataclass
class BiTemporalSample:
    """A co-registered pre/post image pair with an optional change mask."""

    image_a: torch.Tensor          # [3, H, W], values in [0, 1]
    image_b: torch.Tensor          # [3, H, W], values in [0, 1]
    mask: Optional[torch.Tensor]   # [H, W] in {0, 1}, or None
    id: str

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape:
            raise ValidationError(
                f"temporal images differ in shape: {tuple(self.image_a.shape)} "
                f"vs {tuple(self.image_b.shape)}"
            )
        if self.mask is not None:
            if self.mask.shape != self.image_a.shape[-2:]:
                raise ValidationError(
                    f"mask shape {tuple(self.mask.shape)} does not match image "
                    f"spatial dims {tuple(self.image_a.shape[-2:])}"
                )
            values = torch.unique(self.mask)
            if not torch.all((values == 0) | (values == 1)):
                raise ValidationError("mask must contain only {0, 1}")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.image_a.shape[-2:])


@dataclass
class SplitManifest:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    labeled_fraction: float
    seed: int

    FILES = ("labeled", "unlabeled", "val", "test")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self.FILES:
            ids = getattr(self, f"{name}_ids")
            (directory / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))
        (directory / "split.json").write_text(json.dumps(
            {"labeled_fraction": self.labeled_fraction, "seed": self.seed}, indent=2))

    @classmethod
    def load(cls, directory) -> "SplitManifest":
        directory = Path(directory)
        lists = {}
        for name in cls.FILES:
            path = directory / f"{name}.txt"
            if not path.exists():
                raise DataError(f"missing manifest file {path}")
            lists[f"{name}_ids"] = [line for line in path.read_text().splitlines() if line]
        meta = json.loads((directory / "split.json").read_text())
        return cls(**lists, labeled_fraction=meta["labeled_fraction"], seed=meta["seed"])


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    rescale_range: tuple[float, float] = (0.8, 1.2)
    crop_size: int = 256
    blur_prob: float = 0.5
    jitter_strength: float = 0.2

    def __post_init__(self):
        self.rescale_range = tuple(self.rescale_range)
        lo, hi = self.rescale_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValidationError(f"bad rescale_range {self.rescale_range}")
        if self.jitter_strength < 0:
            raise ValidationError("jitter_strength must be >= 0")


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_image(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _read_mask(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("L"))
    return torch.from_numpy((arr != 0).astype(np.float32))


def load_pair(path_a, path_b, path_mask=None, id: str | None = None) -> BiTemporalSample:
    """Load a pre/post pair (and optional label) from image files.

    Pixel values are scaled to [0,1]; any nonzero label value maps to 1.
    """
    image_a = _read_image(path_a)
    image_b = _read_image(path_b)
    mask = _read_mask(path_mask) if path_mask is not None else None
    return BiTemporalSample(image_a=image_a, image_b=image_b, mask=mask,
                            id=id or Path(path_a).stem)


class PairFolder:
    """Access to one dataset root in the A/B/label layout."""

    def __init__(self, root):
        self.root = Path(root)
        missing = [d for d in ("A", "B") if not (self.root / d).is_dir()]
        if missing:
            raise DataError(f"dataset root {self.root} is missing directories: {missing}")
        self.label_dir = self.root / "label"

    def ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "A").glob("*.png"))

    def load(self, id: str, with_mask: bool = True) -> BiTemporalSample:
        label = self.label_dir / f"{id}.png"
        mask_path = label if (with_mask and label.exists()) else None
        return load_pair(self.root / "A" / f"{id}.png", self.root / "B" / f"{id}.png",
                         mask_path, id=id)


# ---------------------------------------------------------------------------
# patching and splits
# ---------------------------------------------------------------------------

def extract_patches(sample: BiTemporalSample, patch_size: int) -> list[BiTemporalSample]:
    """Tile into non-overlapping patch_size squares anchored at (0,0).

    Trailing partial tiles are discarded. Patch ids append the grid position
    to the parent id.
    """
    if patch_size < 1:
        raise ValidationError("patch_size must be >= 1")
    h, w = sample.size
    if patch_size > h or patch_size > w:
        raise ValidationError(f"patch_size {patch_size} exceeds image size {h}x{w}")
    patches = []
    for row in range(h // patch_size):
        for col in range(w // patch_size):
            ys = slice(row * patch_size, (row + 1) * patch_size)
            xs = slice(col * patch_size, (col + 1) * patch_size)
            patches.append(BiTemporalSample(
                image_a=sample.image_a[:, ys, xs].clone(),
                image_b=sample.image_b[:, ys, xs].clone(),
                mask=sample.mask[ys, xs].clone() if sample.mask is not None else None,
                id=f"{sample.id}_{row}_{col}",
            ))
    return patches


def make_split(train_ids: list[str], labeled_fraction: float, seed: int) -> SplitManifest:
    """Deterministic labeled/unlabeled partition of a train-set id list.

    The sorted id list is shuffled with the seed and a prefix of
    round(fraction * n) ids (at least 1) becomes the labeled set, so the
    result does not depend on filesystem ordering.
    """
    if not train_ids:
        raise ValidationError("train_ids must be nonempty")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValidationError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    order = sorted(train_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    n_labeled = max(1, round(labeled_fraction * len(order)))
    return SplitManifest(
        labeled_ids=order[:n_labeled],
        unlabeled_ids=order[n_labeled:],
        val_ids=[],
        test_ids=[],
        labeled_fraction=labeled_fraction,
        seed=seed,
    )


def make_full_split(ids: list[str], labeled_fraction: float, seed: int,
                    val_fraction: float = 0.0, test_fraction: float = 0.0) -> SplitManifest:
    """Carve val/test subsets off a flat corpus, then split the remaining
    train ids into labeled/unlabeled."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ValidationError("val/test fractions must be >= 0 and sum below 1")
    order = sorted(ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    n_val = round(val_fraction * len(order))
    n_test = round(test_fraction * len(order))
    val_ids = order[:n_val]
    test_ids = order[n_val:n_val + n_test]
    manifest = make_split(order[n_val + n_test:], labeled_fraction, seed)
    manifest.val_ids = val_ids
    manifest.test_ids = test_ids
    return manifest


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resize(img: torch.Tensor, size: tuple[int, int], mode: str) -> torch.Tensor:
    x = img.unsqueeze(0) if img.dim() == 3 else img.unsqueeze(0).unsqueeze(0)
    x = F.interpolate(x, size=size, mode=mode,
                      **({"align_corners": False} if mode == "bilinear" else {}))
    return x.squeeze(0) if img.dim() == 3 else x.squeeze(0).squeeze(0)


def _reflect_pad_to(img: torch.Tensor, size: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return img
    pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
    if max(pad[0], pad[1]) >= w or max(pad[2], pad[3]) >= h:
        raise ValidationError(
            f"crop_size {size} is too large to reflect-pad a {h}x{w} image; "
            f"use a crop_size of at most the (rescaled) patch size"
        )
    x = img.unsqueeze(0) if img.dim() == 3 else img.unsqueeze(0).unsqueeze(0)
    x = F.pad(x, pad, mode="reflect")
    return x.squeeze(0) if img.dim() == 3 else x.squeeze(0).squeeze(0)


def _gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(2.0 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=img.dtype)
    kernel = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = kernel / kernel.sum()
    c = img.shape[0]
    x = img.unsqueeze(0)
    kh = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, kh, groups=c)
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kw, groups=c)
    return x.squeeze(0)


def _color_jitter(img: torch.Tensor, rng: np.random.Generator, strength: float) -> torch.Tensor:
    brightness = float(rng.uniform(1.0 - strength, 1.0 + strength))
    contrast = float(rng.uniform(1.0 - strength, 1.0 + strength))
    out = img * brightness
    mean = out.mean()
    return ((out - mean) * contrast + mean).clamp(0.0, 1.0)


def augment(sample: BiTemporalSample, config: AugmentationConfig,
            rng: np.random.Generator) -> BiTemporalSample:
    """Random flip / rescale / crop shared by both images and the mask, then
    per-image blur and color jitter.

    If rescaling shrinks the pair below crop_size, it is reflect-padded back
    up before cropping. The output spatial size is always crop_size and the
    mask stays binary (nearest-neighbor resampling).
    """
    a, b = sample.image_a, sample.image_b
    m = sample.mask

    if rng.random() < config.flip_prob:  # horizontal
        a, b = torch.flip(a, [-1]), torch.flip(b, [-1])
        m = torch.flip(m, [-1]) if m is not None else None
    if rng.random() < config.flip_prob:  # vertical
        a, b = torch.flip(a, [-2]), torch.flip(b, [-2])
        m = torch.flip(m, [-2]) if m is not None else None

    scale = float(rng.uniform(*config.rescale_range))
    if scale != 1.0:
        h, w = a.shape[-2:]
        new_size = (max(1, int(h * scale)), max(1, int(w * scale)))
        a = _resize(a, new_size, "bilinear")
        b = _resize(b, new_size, "bilinear")
        m = _resize(m, new_size, "nearest") if m is not None else None

    crop = config.crop_size
    a = _reflect_pad_to(a, crop)
    b = _reflect_pad_to(b, crop)
    m = _reflect_pad_to(m, crop) if m is not None else None

    h, w = a.shape[-2:]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    a = a[:, top:top + crop, left:left + crop]
    b = b[:, top:top + crop, left:left + crop]
    m = m[top:top + crop, left:left + crop] if m is not None else None

    processed = []
    for img in (a, b):
        if rng.random() < config.blur_prob:
            img = _gaussian_blur(img, sigma=float(rng.uniform(0.1, 2.0)))
        if config.jitter_strength > 0:
            img = _color_jitter(img, rng, config.jitter_strength)
        processed.append(img.clamp(0.0, 1.0))
    a, b = processed

    return BiTemporalSample(image_a=a.contiguous(), image_b=b.contiguous(),
                            mask=m.contiguous() if m is not None else None,
                            id=sample.id)
