import numpy as np
import pytest
import torch

from cdkit.data import AugmentationConfig, make_full_split
from cdkit.synthetic import make_toy_corpus, write_corpus
from cdkit.trainer import TrainConfig, Trainer


def identity_augmentation(size: int) -> AugmentationConfig:
    return AugmentationConfig(flip_prob=0.0, rescale_range=(1.0, 1.0), crop_size=size,
                              blur_prob=0.0, jitter_strength=0.0)


def toy_train_config(data_root, split_dir, out_dir, **overrides) -> TrainConfig:
    defaults = dict(
        data_root=str(data_root),
        split_dir=str(split_dir),
        out_dir=str(out_dir),
        backbone="tiny",
        lr=0.05,
        epochs=2,
        batch_labeled=4,
        batch_unlabeled=4,
        ramp_fraction=0.3,
        seed=0,
        augmentation=AugmentationConfig(flip_prob=0.5, rescale_range=(1.0, 1.0),
                                        crop_size=64, blur_prob=0.0, jitter_strength=0.0),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """A small on-disk corpus with split manifests: 8 labeled / 8 unlabeled / 4 test."""
    root = tmp_path_factory.mktemp("toy_data")
    samples = make_toy_corpus(n=20, size=64, seed=123)
    write_corpus(samples, root)
    manifest = make_full_split([s.id for s in samples], labeled_fraction=0.5,
                               seed=7, test_fraction=0.2)
    split_dir = root / "splits"
    manifest.save(split_dir)
    return {"root": root, "split_dir": split_dir, "manifest": manifest}


@pytest.fixture(scope="session")
def trained_checkpoint(toy_dataset, tmp_path_factory):
    """A briefly trained tiny model for eval/infer/analyze tests."""
    out = tmp_path_factory.mktemp("toy_run")
    config = toy_train_config(toy_dataset["root"], toy_dataset["split_dir"], out,
                              epochs=12, perturbations=[])
    summary = Trainer(config).fit()
    return {"summary": summary, "config": config, **toy_dataset}


def rand_probability_map(shape, rng: np.random.Generator):
    """A valid two-class probability tensor [..., 2, H, W] plus matching logits."""
    from cdkit.model import ChangeProbabilityMap

    logits = torch.from_numpy(rng.normal(size=shape).astype(np.float32))
    return ChangeProbabilityMap.from_logits(logits)
