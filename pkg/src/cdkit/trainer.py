"""Two-phase semi-supervised training: supervised CE on labeled pairs plus a
ramped consistency term over perturbed feature-difference maps of unlabeled
pairs, each perturbation decoded by its own auxiliary decoder.

Every random draw derives from the config seed: parameter init and
perturbations from torch generators whose states are checkpointed, data
shuffling and augmentation from numpy streams keyed by (seed, purpose,
epoch/cursor, position). Training is therefore reproducible and resumable.
"""
from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import metrics
from .data import AugmentationConfig, BiTemporalSample, PairFolder, SplitManifest, augment
from .errors import ConfigError, DataError, ValidationError
from .losses import LossReport, RampUpSchedule, consistency_loss, ramp_up, supervised_loss, total_loss
from .model import ChangeDetectionNet, ChangeProbabilityMap, model_config
from .perturb import apply_all, parse_specs

CHECKPOINT_VERSION = 1

# tags separating the derived numpy streams
_SHUFFLE_LABELED, _AUG_LABELED, _SHUFFLE_UNLABELED, _AUG_UNLABELED = 10, 11, 12, 13


@dataclass
class TrainConfig:
    data_root: str = ""
    split_dir: str = ""
    out_dir: str = "run"
    backbone: str = "full"              # "full" or "tiny"
    diff_channels: Optional[int] = None  # override the profile's C_d
    lr: float = 0.01
    epochs: int = 80
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    ramp_fraction: float = 0.3
    perturbations: list = field(default_factory=lambda: [
        "feature_noise", "feature_drop", "guided_cutout",
        "content_mask", "object_mask", "feature_vat",
    ])
    seed: int = 0
    threshold: float = 0.5
    pretrained_encoder: Optional[str] = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ConfigError(f"ramp_fraction must be in (0, 1], got {self.ramp_fraction}")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)


def apply_overrides(payload: dict, overrides: list[str]) -> dict:
    """Apply `dotted.path=value` overrides to a config dict, after file values.

    Values parse as JSON when possible, else as raw strings. Unknown keys are
    rejected before any work starts.
    """
    reference = dataclasses.asdict(TrainConfig())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        ref_node = reference
        node = payload
        for key in keys[:-1]:
            if not isinstance(ref_node, dict) or key not in ref_node:
                raise ConfigError(f"unknown config key {dotted!r}")
            ref_node = ref_node[key]
            node = node.setdefault(key, {})
        leaf = keys[-1]
        if not isinstance(ref_node, dict) or leaf not in ref_node:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[leaf] = value
    return payload


@dataclass
class Batch:
    image_a: torch.Tensor            # [B, 3, H, W]
    image_b: torch.Tensor            # [B, 3, H, W]
    mask: Optional[torch.Tensor]     # [B, H, W] or None

    def __len__(self):
        return self.image_a.shape[0]


def collate(samples: list[BiTemporalSample]) -> Batch:
    masks = [s.mask for s in samples]
    return Batch(
        image_a=torch.stack([s.image_a for s in samples]),
        image_b=torch.stack([s.image_b for s in samples]),
        mask=torch.stack(masks) if all(m is not None for m in masks) else None,
    )


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def poly_lr(base_lr: float, iteration: int, total: int, power: float) -> float:
    frac = max(0.0, 1.0 - iteration / max(1, total))
    return base_lr * frac ** power


class Trainer:
    """Owns the model, optimizer, and random streams for one training run."""

    def __init__(self, config: TrainConfig, total_iters: Optional[int] = None):
        self.config = config
        self.specs = parse_specs(config.perturbations)
        overrides = {}
        if config.diff_channels is not None:
            overrides["diff_channels"] = config.diff_channels
        self.model_config = model_config(config.backbone, n_aux=len(self.specs), **overrides)
        torch.manual_seed(config.seed)
        self.model = ChangeDetectionNet(self.model_config)
        if config.pretrained_encoder:
            if config.backbone != "full":
                raise ConfigError("pretrained_encoder only applies to the full backbone")
            self.model.encoder.load_pretrained(config.pretrained_encoder)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=config.lr,
            momentum=config.momentum, weight_decay=config.weight_decay,
        )
        self.perturb_rng = torch.Generator().manual_seed(config.seed + 1)
        self.iteration = 0
        self.epoch = 0
        self.best_val_iou = -1.0
        self.unlabeled_cursor = 0
        self.total_iters = total_iters
        self._unsup_enabled = bool(self.specs)

    # -- schedule ----------------------------------------------------------

    @property
    def schedule(self) -> RampUpSchedule:
        if self.total_iters is None:
            raise ConfigError("total iteration count not set; call fit() or pass total_iters")
        ramp = max(1, math.ceil(self.config.ramp_fraction * self.total_iters))
        return RampUpSchedule(ramp_iters=ramp, total_iters=max(1, self.total_iters))

    # -- one optimization step ----------------------------------------------

    def _vat_decode(self, x: torch.Tensor) -> ChangeProbabilityMap:
        # read-only evaluation: BatchNorm statistics must not shift
        main = self.model.decoders.main
        was_training = main.training
        main.eval()
        try:
            return self.model.decode(x, "main")
        finally:
            main.train(was_training)

    def _unsupervised_loss(self, unlabeled: Batch) -> torch.Tensor:
        y_hat, f_d = self.model.forward_cd(unlabeled.image_a, unlabeled.image_b)
        perturbed = apply_all(f_d, y_hat, self.specs, self.perturb_rng,
                              decode_fn=self._vat_decode)
        if len(perturbed) != len(self.model.decoders.auxiliaries):
            raise ValidationError(
                f"{len(perturbed)} perturbed maps for "
                f"{len(self.model.decoders.auxiliaries)} auxiliary decoders"
            )
        aux_preds = [self.model.decode(p, i) for i, p in enumerate(perturbed)]
        return consistency_loss(aux_preds, y_hat)

    def train_step(self, labeled: Batch, unlabeled: Optional[Batch]) -> LossReport:
        if labeled is None or len(labeled) == 0:
            raise ValidationError("labeled batch must be non-empty")
        if labeled.mask is None:
            raise ValidationError("labeled batch is missing change masks")
        self.model.train()
        lr = poly_lr(self.config.lr, self.iteration, self.total_iters, self.config.poly_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        y_hat, _ = self.model.forward_cd(labeled.image_a, labeled.image_b)
        sup = supervised_loss(y_hat, labeled.mask)
        lam = ramp_up(self.iteration, self.schedule)

        use_unsup = (self._unsup_enabled and unlabeled is not None and len(unlabeled) > 0)
        unsup = self._unsupervised_loss(unlabeled) if use_unsup else None

        loss = sup if unsup is None else sup + lam * unsup
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.iteration += 1
        return total_loss(sup.detach().item(),
                          0.0 if unsup is None else unsup.detach().item(), lam)

    # -- data streams ---------------------------------------------------------

    def _augmented(self, folder: PairFolder, id: str, tag: int, *key: int,
                   with_mask: bool) -> BiTemporalSample:
        sample = folder.load(id, with_mask=with_mask)
        rng = _stream(self.config.seed, tag, *key)
        return augment(sample, self.config.augmentation, rng)

    def _labeled_batches(self, folder: PairFolder, ids: list[str], epoch: int):
        order = _stream(self.config.seed, _SHUFFLE_LABELED, epoch).permutation(len(ids))
        bs = self.config.batch_labeled
        for start in range(0, len(ids), bs):
            chunk = [ids[i] for i in order[start:start + bs]]
            samples = [
                self._augmented(folder, id, _AUG_LABELED, epoch, start + k, with_mask=True)
                for k, id in enumerate(chunk)
            ]
            if any(s.mask is None for s in samples):
                missing = [s.id for s in samples if s.mask is None]
                raise DataError(f"labeled samples without a label file: {missing}")
            yield collate(samples)

    def _next_unlabeled_batch(self, folder: PairFolder, ids: list[str]) -> Batch:
        samples = []
        for _ in range(self.config.batch_unlabeled):
            cycle, pos = divmod(self.unlabeled_cursor, len(ids))
            order = _stream(self.config.seed, _SHUFFLE_UNLABELED, cycle).permutation(len(ids))
            id = ids[order[pos]]
            samples.append(self._augmented(folder, id, _AUG_UNLABELED,
                                           self.unlabeled_cursor, with_mask=False))
            self.unlabeled_cursor += 1
        return Batch(
            image_a=torch.stack([s.image_a for s in samples]),
            image_b=torch.stack([s.image_b for s in samples]),
            mask=None,
        )

    # -- full loop -----------------------------------------------------------

    def fit(self) -> dict:
        config = self.config
        folder = PairFolder(config.data_root)
        manifest = SplitManifest.load(config.split_dir)
        if not manifest.labeled_ids:
            raise DataError("labeled split is empty")
        if self.specs and not manifest.unlabeled_ids:
            warnings.warn("unlabeled split is empty; falling back to supervised-only training")
            self._unsup_enabled = False

        steps_per_epoch = math.ceil(len(manifest.labeled_ids) / config.batch_labeled)
        self.total_iters = max(1, config.epochs * steps_per_epoch)

        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        best_path = out_dir / "ckpt_best.bin"
        last_path = out_dir / "ckpt_last.bin"

        # fresh runs truncate; resumed runs append
        with log_path.open("w" if self.iteration == 0 else "a") as log:
            for epoch in range(self.epoch, config.epochs):
                self.epoch = epoch
                for labeled in self._labeled_batches(folder, manifest.labeled_ids, epoch):
                    unlabeled = (
                        self._next_unlabeled_batch(folder, manifest.unlabeled_ids)
                        if self._unsup_enabled else None
                    )
                    lr = poly_lr(config.lr, self.iteration, self.total_iters, config.poly_power)
                    report = self.train_step(labeled, unlabeled)
                    log.write(json.dumps({
                        "type": "step", "iteration": self.iteration,
                        "epoch": epoch, "lr": lr, **report.to_json(),
                    }) + "\n")
                self.epoch = epoch + 1
                if manifest.val_ids:
                    val = evaluate_model(self.model, folder, manifest.val_ids,
                                         config.threshold, config.batch_labeled)
                    log.write(json.dumps({
                        "type": "epoch", "epoch": epoch,
                        "val_iou": val["iou_change"], "val_oa": val["overall_accuracy"],
                    }) + "\n")
                    if val["iou_change"] > self.best_val_iou:
                        self.best_val_iou = val["iou_change"]
                        self.save_checkpoint(best_path)
                self.save_checkpoint(last_path)

        self.save_checkpoint(last_path)
        if not best_path.exists():
            # no validation split: keep the final state as the best checkpoint
            self.save_checkpoint(best_path)
        return {
            "best_val_iou": self.best_val_iou,
            "iterations": self.iteration,
            "ckpt_best": str(best_path),
            "ckpt_last": str(last_path),
            "log": str(log_path),
        }

    # -- checkpointing ---------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "model_config": dataclasses.asdict(self.model_config),
            "config_hash": self.model_config.hash(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "iteration": self.iteration,
            "epoch": self.epoch,
            "best_val_iou": self.best_val_iou,
            "unlabeled_cursor": self.unlabeled_cursor,
            "total_iters": self.total_iters,
            "perturb_rng": self.perturb_rng.get_state(),
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(payload, path)

    @classmethod
    def resume(cls, path, config: Optional[TrainConfig] = None) -> "Trainer":
        payload = load_checkpoint(path)
        trainer_config = TrainConfig.from_dict(payload["config"]) if config is None else config
        trainer = cls(trainer_config, total_iters=payload["total_iters"])
        if trainer.model_config.hash() != payload["config_hash"]:
            raise ConfigError(
                f"checkpoint config hash {payload['config_hash']} does not match "
                f"requested model config hash {trainer.model_config.hash()}"
            )
        trainer.model.load_state_dict(payload["model"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.iteration = payload["iteration"]
        trainer.epoch = payload["epoch"]
        trainer.best_val_iou = payload["best_val_iou"]
        trainer.unlabeled_cursor = payload["unlabeled_cursor"]
        trainer.perturb_rng.set_state(payload["perturb_rng"])
        torch.set_rng_state(payload["torch_rng"])
        return trainer


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def build_model_from_checkpoint(payload: dict) -> ChangeDetectionNet:
    from .model import ModelConfig

    cfg = ModelConfig(**{**payload["model_config"],
                         "ppm_scales": tuple(payload["model_config"]["ppm_scales"])})
    model = ChangeDetectionNet(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


@torch.no_grad()
def evaluate_model(model: ChangeDetectionNet, folder: PairFolder, ids: list[str],
                   threshold: float = 0.5, batch_size: int = 8) -> dict:
    """Global confusion counts of the main decoder over a split."""
    if not ids:
        raise ValidationError("evaluation split is empty")
    was_training = model.training
    model.eval()
    counts = metrics.ConfusionCounts()
    for start in range(0, len(ids), batch_size):
        samples = [folder.load(id, with_mask=True) for id in ids[start:start + batch_size]]
        missing = [s.id for s in samples if s.mask is None]
        if missing:
            raise DataError(f"evaluation samples without labels: {missing}")
        batch = collate(samples)
        y_hat = model.forward_cd(batch.image_a, batch.image_b)[0]
        pred = metrics.binarize(y_hat, threshold)
        counts = metrics.accumulate(pred, batch.mask.numpy(), counts)
    model.train(was_training)
    return {
        "iou_change": metrics.iou_change(counts),
        "overall_accuracy": metrics.overall_accuracy(counts),
        "tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn,
        "threshold": threshold,
    }


def fit(config: TrainConfig) -> dict:
    """Run a full training job and return the artifact summary."""
    return Trainer(config).fit()


def evaluate(checkpoint_path, data_root, ids: list[str], threshold: float = 0.5,
             out_path=None, batch_size: int = 8) -> dict:
    """Evaluate a checkpoint on a split and optionally write the JSON report."""
    payload = load_checkpoint(checkpoint_path)
    model = build_model_from_checkpoint(payload)
    report = evaluate_model(model, PairFolder(data_root), ids, threshold, batch_size)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2))
    return report
