import math

import numpy as np
import pytest
import torch
from PIL import Image

from cdkit.cluster import (DensityMap, feature_domain_density, image_domain_density,
                           mask_boundary, render_density)
from cdkit.data import BiTemporalSample
from cdkit.errors import ValidationError


def constant_pair(h, w, value=0.5):
    img = torch.full((3, h, w), value)
    return BiTemporalSample(image_a=img.clone(), image_b=img.clone(), mask=None, id="c")


def brute_image_density(composite, patch):
    """Independent oracle: L2 distances between flattened patch vectors."""
    _, h, w = composite.shape
    gh, gw = h // patch, w // patch
    vectors = {}
    for i in range(gh):
        for j in range(gw):
            vectors[i, j] = composite[:, i * patch:(i + 1) * patch,
                                      j * patch:(j + 1) * patch].flatten().numpy()
    out = np.zeros((gh, gw))
    for i in range(gh):
        for j in range(gw):
            dists = []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if (di, dj) == (0, 0):
                        continue
                    ni, nj = i + di, j + dj
                    if 0 <= ni < gh and 0 <= nj < gw:
                        dists.append(np.linalg.norm(vectors[i, j] - vectors[ni, nj]))
            out[i, j] = sum(dists) / len(dists)
    return out


class TestImageDomainDensity:
    def test_constant_pair_gives_zero(self):
        density = image_domain_density(constant_pair(45, 45))
        assert density.values.shape == (3, 3)
        assert np.all(density.values == 0)
        assert density.cell_size == 15

    def test_anomalous_cell_affects_itself_and_neighbors_only(self):
        sample = constant_pair(75, 75)  # 5x5 grid
        sample.image_b[:, 30:45, 30:45] = 1.0  # center cell (2,2) of the composite
        density = image_domain_density(sample)
        for i in range(5):
            for j in range(5):
                if max(abs(i - 2), abs(j - 2)) <= 1:
                    assert density.values[i, j] > 0
                else:
                    assert density.values[i, j] == 0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        a = torch.from_numpy(rng.uniform(size=(3, 47, 61)).astype(np.float32))
        b = torch.from_numpy(rng.uniform(size=(3, 47, 61)).astype(np.float32))
        sample = BiTemporalSample(image_a=a, image_b=b, mask=None, id="r")
        density = image_domain_density(sample)
        expected = brute_image_density(torch.cat([a, b], 0), 15)
        assert density.values.shape == expected.shape == (3, 4)
        np.testing.assert_allclose(density.values, expected, rtol=1e-5)

    def test_grid_arithmetic_256(self):
        density = image_domain_density(constant_pair(256, 256))
        assert density.values.shape == (17, 17)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValidationError):
            image_domain_density(constant_pair(44, 45))


class TestFeatureDomainDensity:
    def test_constant_map_gives_zero(self):
        density = feature_domain_density(torch.full((8, 5, 5), 1.5))
        assert np.all(density.values == 0)
        assert density.cell_size == 4

    def test_single_distinct_vector_brute_force(self):
        f_d = torch.zeros(4, 5, 5)
        f_d[:, 2, 1] = 3.0
        density = feature_domain_density(f_d)
        # squared L2 distance to the hot vector is 4 * 3^2 = 36
        for i in range(5):
            for j in range(5):
                if (i, j) == (2, 1):
                    assert density.values[i, j] == pytest.approx(36.0)
                elif max(abs(i - 2), abs(j - 1)) == 1:
                    neighbors = sum(
                        1 for di in (-1, 0, 1) for dj in (-1, 0, 1)
                        if (di, dj) != (0, 0) and 0 <= i + di < 5 and 0 <= j + dj < 5)
                    assert density.values[i, j] == pytest.approx(36.0 / neighbors)
                else:
                    assert density.values[i, j] == 0

    def test_output_shape_contract(self):
        f_d = torch.rand(16, 7, 9)
        assert feature_domain_density(f_d).values.shape == (7, 9)

    def test_swap_invariance_via_difference_symmetry(self):
        from cdkit.model import build_model, model_config

        net = build_model(model_config("tiny"), seed=0).eval()
        a, b = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            fd_ab = net.forward_cd(a, b)[1][0]
            fd_ba = net.forward_cd(b, a)[1][0]
        np.testing.assert_array_equal(feature_domain_density(fd_ab).values,
                                      feature_domain_density(fd_ba).values)

    def test_too_small_map_rejected(self):
        with pytest.raises(ValidationError):
            feature_domain_density(torch.rand(4, 2, 5))


class TestTranslationConsistency:
    def test_interior_values_translate_with_input(self):
        rng = np.random.default_rng(1)
        base = torch.from_numpy(rng.uniform(size=(6, 8, 8)).astype(np.float32))
        shifted = torch.roll(base, shifts=1, dims=2)
        d0 = feature_domain_density(base).values
        d1 = feature_domain_density(shifted).values
        # interior cells (away from the wrap-around column) translate exactly
        np.testing.assert_allclose(d1[1:-1, 2:-1], d0[1:-1, 1:-2], rtol=1e-6)


class TestRenderDensity:
    def test_all_zero_density_renders_uniform_blue(self, tmp_path):
        density = DensityMap(values=np.zeros((4, 4)), domain="feature", cell_size=4)
        rgb = render_density(density, out_path=tmp_path / "zero.png")
        assert rgb.shape == (16, 16, 3)
        assert np.all(rgb[..., 2] == 255) and np.all(rgb[..., 0] == 0)
        assert (tmp_path / "zero.png").exists()
        reread = np.asarray(Image.open(tmp_path / "zero.png"))
        np.testing.assert_array_equal(reread, rgb)

    def test_max_cell_is_reddest_block(self):
        values = np.arange(9, dtype=float).reshape(3, 3)
        rgb = render_density(DensityMap(values=values, domain="image", cell_size=15))
        redness = rgb[..., 0].astype(int) - rgb[..., 2].astype(int)
        top = np.unravel_index(np.argmax(redness), redness.shape)
        assert (top[0] // 15, top[1] // 15) == (2, 2)
        assert np.all(redness[30:45, 30:45] == redness.max())

    def test_contour_lands_on_4_connected_boundary(self):
        values = np.random.default_rng(2).uniform(0.1, 1.0, size=(8, 8))
        gt = np.zeros((32, 32), dtype=np.uint8)
        gt[8:20, 10:25] = 1
        rgb = render_density(DensityMap(values=values, domain="feature", cell_size=4), gt=gt)
        black = np.all(rgb == 0, axis=-1)
        # independent boundary oracle
        expected = np.zeros_like(gt, dtype=bool)
        for i in range(32):
            for j in range(32):
                if gt[i, j] == 1:
                    for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                        if 0 <= ni < 32 and 0 <= nj < 32 and gt[ni, nj] == 0:
                            expected[i, j] = True
                            break
        np.testing.assert_array_equal(black, expected)

    def test_mask_boundary_of_full_mask_is_empty(self):
        assert not mask_boundary(np.ones((4, 4))).any()
