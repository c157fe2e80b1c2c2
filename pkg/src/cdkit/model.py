"""Bi-temporal change detection network.

A shared-weight encoder maps each temporal image to a feature cube at 1/4 of
the input resolution; the absolute difference of the two cubes is pooled by a
pyramid pooling block into the feature-difference map; a main decoder (and
optionally a bank of auxiliary decoders with identical topology) upsamples the
difference map back to full resolution with two sub-pixel (pixel-shuffle)
stages and projects to two-class logits.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class ChangeProbabilityMap:
    """Two-class per-pixel prediction: raw logits plus their softmax."""

    logits: torch.Tensor  # [..., 2, H, W]
    probs: torch.Tensor   # [..., 2, H, W], rows sum to 1

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "ChangeProbabilityMap":
        return cls(logits=logits, probs=torch.softmax(logits, dim=-3))

    @property
    def change_prob(self) -> torch.Tensor:
        """Probability of the change class, shape [..., H, W]."""
        return self.probs[..., 1, :, :]

    def detach(self) -> "ChangeProbabilityMap":
        return ChangeProbabilityMap(self.logits.detach(), self.probs.detach())


@dataclass
class ModelConfig:
    backbone: str = "full"          # "full" (ResNet-50) or "tiny" (4 conv stages)
    encoder_channels: int = 2048    # C_e
    diff_channels: int = 512        # C_d, width of the feature-difference map
    ppm_scales: tuple = (1, 2, 3, 6)
    num_classes: int = 2
    n_aux: int = 0                  # auxiliary decoders, one per perturbation
    size_divisor: int = 32

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def model_config(backbone: str, n_aux: int = 0, **overrides) -> ModelConfig:
    """Build the config for a named backbone profile."""
    if backbone == "full":
        cfg = ModelConfig(backbone="full", encoder_channels=2048, diff_channels=512,
                          size_divisor=32, n_aux=n_aux)
    elif backbone == "tiny":
        cfg = ModelConfig(backbone="tiny", encoder_channels=64, diff_channels=64,
                          size_divisor=4, n_aux=n_aux)
    else:
        raise ValidationError(f"unknown backbone profile {backbone!r}")
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValidationError(f"unknown model config field {key!r}")
        setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class TinyEncoder(nn.Module):
    """CPU-scale backbone: 4 conv stages, total stride 4."""

    def __init__(self, out_channels: int = 64):
        super().__init__()
        mid = max(out_channels // 2, 8)
        self.stages = nn.Sequential(
            nn.Conv2d(3, mid, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, out_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.stages(x)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, dilation=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class ResNet50Encoder(nn.Module):
    """ResNet-50 with strides of layers 2-4 replaced by dilation.

    Output stride is 4 (the stem), so a HxW input yields a 2048 x H/4 x W/4
    feature cube. Parameter names match the torchvision ResNet-50 layout, so
    ImageNet weights can be loaded from a local state-dict file.
    """

    def __init__(self):
        super().__init__()
        self.inplanes = 64
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_layer(64, 3, stride=1, dilation=1)
        self.layer2 = self._make_layer(128, 4, stride=1, dilation=2)
        self.layer3 = self._make_layer(256, 6, stride=1, dilation=4)
        self.layer4 = self._make_layer(512, 3, stride=1, dilation=8)

    def _make_layer(self, planes, blocks, stride, dilation):
        downsample = None
        out_planes = planes * Bottleneck.expansion
        if stride != 1 or self.inplanes != out_planes:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, out_planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_planes),
            )
        layers = [Bottleneck(self.inplanes, planes, stride, dilation, downsample)]
        self.inplanes = out_planes
        layers += [Bottleneck(self.inplanes, planes, 1, dilation) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def load_pretrained(self, path: str):
        """Load an ImageNet ResNet-50 state dict from a local file."""
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        self.load_state_dict(state, strict=False)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


# ---------------------------------------------------------------------------
# feature difference + decoders
# ---------------------------------------------------------------------------

def absolute_difference(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Elementwise |f_a - f_b|; the pre-pooling feature difference."""
    if f_a.shape != f_b.shape:
        raise ValidationError(f"feature shape mismatch: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    return torch.abs(f_a - f_b)


class PyramidPooling(nn.Module):
    """Multi-scale average pooling with a 3x3 fusion conv.

    Reduces the encoder width to the feature-difference width (2048 -> 512 for
    the full profile).
    """

    def __init__(self, in_channels: int, out_channels: int, scales=(1, 2, 3, 6)):
        super().__init__()
        branch = out_channels // len(scales)
        self.branches = nn.ModuleList([
            nn.Sequential(
                nn.AdaptiveAvgPool2d(s),
                nn.Conv2d(in_channels, branch, 1, bias=False),
                nn.BatchNorm2d(branch),
                nn.ReLU(inplace=True),
            )
            for s in scales
        ])
        self.fuse = nn.Sequential(
            nn.Conv2d(in_channels + branch * len(scales), out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        pooled = [
            F.interpolate(branch(x), size=x.shape[-2:], mode="bilinear", align_corners=False)
            for branch in self.branches
        ]
        return self.fuse(torch.cat([x] + pooled, dim=1))


class SubPixelDecoder(nn.Module):
    """Two x2 pixel-shuffle upsampling stages, then a 1x1 projection to logits."""

    def __init__(self, in_channels: int, num_classes: int = 2):
        super().__init__()
        c1 = max(in_channels // 2, num_classes)
        c2 = max(c1 // 2, num_classes)
        self.up1 = nn.Sequential(
            nn.Conv2d(in_channels, c1 * 4, 3, padding=1, bias=False),
            nn.PixelShuffle(2),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.Conv2d(c1, c2 * 4, 3, padding=1, bias=False),
            nn.PixelShuffle(2),
            nn.BatchNorm2d(c2),
            nn.ReLU(inplace=True),
        )
        self.classify = nn.Conv2d(c2, num_classes, 1)

    def forward(self, x):
        return self.classify(self.up2(self.up1(x)))


class DecoderBank(nn.Module):
    """The main decoder plus n_aux auxiliary decoders of identical topology."""

    def __init__(self, in_channels: int, n_aux: int, num_classes: int = 2):
        super().__init__()
        self.main = SubPixelDecoder(in_channels, num_classes)
        self.auxiliaries = nn.ModuleList(
            [SubPixelDecoder(in_channels, num_classes) for _ in range(n_aux)]
        )

    def get(self, which) -> nn.Module:
        if which == "main":
            return self.main
        if isinstance(which, int):
            if not 0 <= which < len(self.auxiliaries):
                raise ValidationError(
                    f"auxiliary decoder index {which} out of range [0, {len(self.auxiliaries)})"
                )
            return self.auxiliaries[which]
        raise ValidationError(f"decoder selector must be 'main' or an int, got {which!r}")


class ChangeDetectionNet(nn.Module):
    """encoder -> |difference| -> pyramid pooling -> decoder(s)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "full":
            self.encoder = ResNet50Encoder()
        else:
            self.encoder = TinyEncoder(config.encoder_channels)
        self.ppm = PyramidPooling(config.encoder_channels, config.diff_channels,
                                  config.ppm_scales)
        self.decoders = DecoderBank(config.diff_channels, config.n_aux, config.num_classes)

    def _check_input(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValidationError(f"expected [B,3,H,W] or [3,H,W] image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        d = self.config.size_divisor
        if h % d or w % d:
            raise ValidationError(
                f"input size {h}x{w} not divisible by {d}; pad to a multiple of {d} first"
            )
        return image

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Feature cube of one temporal image, [B, C_e, H/4, W/4]."""
        squeeze = image.dim() == 3
        feats = self.encoder(self._check_input(image))
        return feats.squeeze(0) if squeeze else feats

    def feature_difference(self, f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        """Pyramid-pooled |f_a - f_b|, [B, C_d, H/4, W/4]. Symmetric in its arguments."""
        squeeze = f_a.dim() == 3
        diff = absolute_difference(f_a, f_b)
        if squeeze:
            diff = diff.unsqueeze(0)
        out = self.ppm(diff)
        return out.squeeze(0) if squeeze else out

    def decode(self, f_d: torch.Tensor, which="main") -> ChangeProbabilityMap:
        squeeze = f_d.dim() == 3
        decoder = self.decoders.get(which)
        logits = decoder(f_d.unsqueeze(0) if squeeze else f_d)
        if squeeze:
            logits = logits.squeeze(0)
        return ChangeProbabilityMap.from_logits(logits)

    def forward_cd(self, image_a: torch.Tensor, image_b: torch.Tensor):
        """Main prediction plus the feature-difference map it was decoded from."""
        f_a = self.encode(image_a)
        f_b = self.encode(image_b)
        f_d = self.feature_difference(f_a, f_b)
        return self.decode(f_d, "main"), f_d

    def forward(self, image_a, image_b):
        return self.forward_cd(image_a, image_b)[0]


def build_model(config: ModelConfig, seed: int | None = None) -> ChangeDetectionNet:
    """Construct a net; seeding makes the random initialization reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return ChangeDetectionNet(config)
