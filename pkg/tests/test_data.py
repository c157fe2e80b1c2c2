import numpy as np
import pytest
import torch
from PIL import Image

from cdkit.data import (AugmentationConfig, BiTemporalSample, PairFolder, SplitManifest,
                        augment, extract_patches, load_pair, make_full_split, make_split)
from cdkit.errors import DataError, ValidationError

from conftest import identity_augmentation


def write_png(path, array):
    Image.fromarray(array).save(path)


@pytest.fixture()
def pair_files(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    b = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    label = (rng.integers(0, 2, size=(32, 32), dtype=np.uint8)) * 255
    write_png(tmp_path / "a.png", a)
    write_png(tmp_path / "b.png", b)
    write_png(tmp_path / "label.png", label)
    return tmp_path, a, b, label


class TestLoadPair:
    def test_well_formed_input(self, pair_files):
        tmp, a, b, label = pair_files
        sample = load_pair(tmp / "a.png", tmp / "b.png", tmp / "label.png")
        assert sample.image_a.shape == (3, 32, 32)
        assert sample.mask is not None
        assert torch.all((sample.image_a >= 0) & (sample.image_a <= 1))
        # 255 labels binarize to 1
        assert np.array_equal(sample.mask.numpy(), (label != 0).astype(np.float32))
        assert torch.allclose(sample.image_a,
                              torch.from_numpy(a.astype(np.float32) / 255).permute(2, 0, 1))

    def test_dimension_mismatch_names_both_shapes(self, tmp_path):
        write_png(tmp_path / "a.png", np.zeros((16, 16, 3), dtype=np.uint8))
        write_png(tmp_path / "b.png", np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(ValidationError, match=r"16.*8|8.*16"):
            load_pair(tmp_path / "a.png", tmp_path / "b.png")

    def test_optional_mask_absent(self, pair_files):
        tmp, *_ = pair_files
        sample = load_pair(tmp / "a.png", tmp / "b.png")
        assert sample.mask is None

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_pair(tmp_path / "nope.png", tmp_path / "alsonope.png")


def toy_sample(h, w, with_mask=True, seed=0):
    rng = np.random.default_rng(seed)
    a = torch.from_numpy(rng.uniform(size=(3, h, w)).astype(np.float32))
    b = torch.from_numpy(rng.uniform(size=(3, h, w)).astype(np.float32))
    mask = torch.from_numpy((rng.uniform(size=(h, w)) > 0.5).astype(np.float32)) \
        if with_mask else None
    return BiTemporalSample(image_a=a, image_b=b, mask=mask, id="s")


class TestExtractPatches:
    def test_exact_tiling(self):
        patches = extract_patches(toy_sample(1024, 1024), 256)
        assert len(patches) == 16

    def test_remainder_discarded(self):
        patches = extract_patches(toy_sample(300, 300), 256)
        assert len(patches) == 1

    def test_identity_case(self):
        sample = toy_sample(256, 256)
        patches = extract_patches(sample, 256)
        assert len(patches) == 1
        assert torch.equal(patches[0].image_a, sample.image_a)
        assert torch.equal(patches[0].mask, sample.mask)

    def test_patch_too_large(self):
        with pytest.raises(ValidationError):
            extract_patches(toy_sample(64, 64), 100)

    def test_partition_covers_each_pixel_once(self):
        sample = toy_sample(96, 64)
        patches = extract_patches(sample, 32)
        coverage = torch.zeros(96, 64)
        for p in patches:
            _, row, col = p.id.split("_")
            ys = slice(int(row) * 32, (int(row) + 1) * 32)
            xs = slice(int(col) * 32, (int(col) + 1) * 32)
            coverage[ys, xs] += 1
            assert torch.equal(p.image_b, sample.image_b[:, ys, xs])
        assert torch.all(coverage == 1)

    def test_ids_carry_grid_coordinates(self):
        patches = extract_patches(toy_sample(64, 96), 32)
        assert sorted(p.id for p in patches) == sorted(
            f"s_{r}_{c}" for r in range(2) for c in range(3))


class TestMakeSplit:
    def test_five_percent_of_hundred(self):
        ids = [f"p{i:03d}" for i in range(100)]
        manifest = make_split(ids, 0.05, seed=1)
        assert len(manifest.labeled_ids) == 5
        assert len(manifest.unlabeled_ids) == 95

    def test_fully_supervised(self):
        ids = [f"p{i}" for i in range(100)]
        manifest = make_split(ids, 1.0, seed=7)
        assert len(manifest.labeled_ids) == 100
        assert manifest.unlabeled_ids == []

    def test_minimum_one_labeled(self):
        # round(0.05 * 10) = round(0.5) = 0, clamped to the stated minimum of 1
        manifest = make_split([f"p{i}" for i in range(10)], 0.05, seed=3)
        assert len(manifest.labeled_ids) == 1
        assert len(manifest.unlabeled_ids) == 9

    def test_pure_function_of_arguments(self):
        ids = [f"p{i}" for i in range(50)]
        a = make_split(ids, 0.2, seed=11)
        b = make_split(list(reversed(ids)), 0.2, seed=11)
        assert a == b

    def test_partition_is_disjoint_and_complete(self):
        ids = [f"p{i}" for i in range(37)]
        manifest = make_split(ids, 0.3, seed=5)
        labeled, unlabeled = set(manifest.labeled_ids), set(manifest.unlabeled_ids)
        assert labeled.isdisjoint(unlabeled)
        assert labeled | unlabeled == set(ids)

    def test_empty_ids_rejected(self):
        with pytest.raises(ValidationError):
            make_split([], 0.5, seed=0)

    def test_manifest_file_roundtrip(self, tmp_path):
        manifest = make_full_split([f"p{i}" for i in range(20)], 0.25, seed=2,
                                   val_fraction=0.1, test_fraction=0.2)
        manifest.save(tmp_path)
        loaded = SplitManifest.load(tmp_path)
        assert loaded == manifest
        assert (tmp_path / "labeled.txt").exists()
        assert (tmp_path / "split.json").exists()

    def test_full_split_counts(self):
        manifest = make_full_split([f"p{i}" for i in range(200)], labeled_fraction=0.0625,
                                   seed=0, test_fraction=0.2)
        assert len(manifest.test_ids) == 40
        assert len(manifest.labeled_ids) == 10
        assert len(manifest.unlabeled_ids) == 150


class TestAugment:
    def test_identity_configuration(self):
        sample = toy_sample(64, 64)
        out = augment(sample, identity_augmentation(64), np.random.default_rng(0))
        assert torch.equal(out.image_a, sample.image_a)
        assert torch.equal(out.image_b, sample.image_b)
        assert torch.equal(out.mask, sample.mask)

    def test_flip_moves_mask_with_images(self):
        sample = toy_sample(32, 32)
        config = AugmentationConfig(flip_prob=1.0, rescale_range=(1.0, 1.0), crop_size=32,
                                    blur_prob=0.0, jitter_strength=0.0)
        out = augment(sample, config, np.random.default_rng(1))
        # both flips fire with probability 1
        assert torch.equal(out.image_a, torch.flip(sample.image_a, [-1, -2]))
        assert torch.equal(out.mask, torch.flip(sample.mask, [-1, -2]))

    def test_downscale_pads_reflectively_to_crop(self):
        # 256 * 0.8 -> 204, below the 256 crop: padding must restore it
        sample = toy_sample(256, 256)
        config = AugmentationConfig(flip_prob=0.0, rescale_range=(0.8, 0.8), crop_size=256,
                                    blur_prob=0.0, jitter_strength=0.0)
        out = augment(sample, config, np.random.default_rng(2))
        assert out.image_a.shape == (3, 256, 256)
        assert out.mask.shape == (256, 256)

    def test_values_stay_in_range_and_mask_binary(self):
        sample = toy_sample(64, 64, seed=3)
        config = AugmentationConfig(flip_prob=0.5, rescale_range=(0.8, 1.2), crop_size=48,
                                    blur_prob=1.0, jitter_strength=0.4)
        for seed in range(10):
            out = augment(sample, config, np.random.default_rng(seed))
            assert out.image_a.shape == (3, 48, 48)
            assert torch.all((out.image_a >= 0) & (out.image_a <= 1))
            assert torch.all((out.image_b >= 0) & (out.image_b <= 1))
            assert set(torch.unique(out.mask).tolist()) <= {0.0, 1.0}

    def test_unlabeled_sample_passes_through(self):
        sample = toy_sample(64, 64, with_mask=False)
        out = augment(sample, identity_augmentation(64), np.random.default_rng(4))
        assert out.mask is None

    def test_crop_far_beyond_image_size_rejected_clearly(self):
        sample = toy_sample(64, 64)
        config = AugmentationConfig(flip_prob=0.0, rescale_range=(1.0, 1.0), crop_size=256,
                                    blur_prob=0.0, jitter_strength=0.0)
        with pytest.raises(ValidationError, match="crop_size"):
            augment(sample, config, np.random.default_rng(7))

    def test_deterministic_given_stream(self):
        sample = toy_sample(64, 64, seed=5)
        config = AugmentationConfig(flip_prob=0.5, rescale_range=(0.9, 1.1), crop_size=48,
                                    blur_prob=0.5, jitter_strength=0.2)
        a = augment(sample, config, np.random.default_rng(6))
        b = augment(sample, config, np.random.default_rng(6))
        assert torch.equal(a.image_a, b.image_a)
        assert torch.equal(a.image_b, b.image_b)


class TestSampleInvariants:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            BiTemporalSample(image_a=torch.zeros(3, 8, 8), image_b=torch.zeros(3, 9, 9),
                             mask=None, id="x")

    def test_bad_mask_values_rejected(self):
        with pytest.raises(ValidationError):
            BiTemporalSample(image_a=torch.zeros(3, 8, 8), image_b=torch.zeros(3, 8, 8),
                             mask=torch.full((8, 8), 0.5), id="x")

    def test_mask_shape_rejected(self):
        with pytest.raises(ValidationError):
            BiTemporalSample(image_a=torch.zeros(3, 8, 8), image_b=torch.zeros(3, 8, 8),
                             mask=torch.zeros(9, 9), id="x")


class TestPairFolder:
    def test_missing_directories_rejected(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            PairFolder(tmp_path)

    def test_ids_and_load(self, toy_dataset):
        folder = PairFolder(toy_dataset["root"])
        ids = folder.ids()
        assert len(ids) == 20
        sample = folder.load(ids[0])
        assert sample.mask is not None
        unlabeled = folder.load(ids[0], with_mask=False)
        assert unlabeled.mask is None
