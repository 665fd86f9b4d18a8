"""Augmentation chain: gates, geometric exactness, photometric arithmetic."""

import numpy as np
import pytest

from fieldshift.augment import (
    AugmentConfig,
    augment_pair,
    geometric_transform,
    photometric_transform,
)
from fieldshift.errors import ConfigError, DataError, DimensionError
from fieldshift.raster import IGNORE, Chip, LabelMask
from fieldshift.rng import stream


def sample_pair(seed=0, side=32, bands=4):
    rng = np.random.default_rng(seed)
    chip = Chip(rng.uniform(0.1, 0.9, (bands, side, side)))
    mask = LabelMask(rng.integers(0, 3, (side, side)).astype(np.uint8))
    return chip, mask


class TestChain:
    def test_zero_probability_is_identity(self):
        chip, mask = sample_pair()
        cfg = AugmentConfig(apply_probability=0.0)
        out_chip, out_mask = augment_pair(chip, mask, cfg, stream(1))
        assert np.array_equal(out_chip.data, chip.data)
        assert np.array_equal(out_mask.data, mask.data)

    def test_misaligned_shapes_rejected(self):
        chip, _ = sample_pair()
        bad_mask = LabelMask(np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(DimensionError):
            augment_pair(chip, bad_mask, AugmentConfig(), stream(1))

    def test_reproducible_per_stream(self):
        chip, mask = sample_pair()
        cfg = AugmentConfig(apply_probability=1.0)
        a = augment_pair(chip, mask, cfg, stream(7, 3, 1))
        b = augment_pair(chip, mask, cfg, stream(7, 3, 1))
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)

    def test_photometric_never_touches_mask(self):
        chip, mask = sample_pair()
        cfg = AugmentConfig(
            apply_probability=1.0,
            flip_modes=(),
            rotation_angles=(),
            resize_scale_range=(1.0, 1.0),
        )
        _, out_mask = augment_pair(chip, mask, cfg, stream(2))
        assert np.array_equal(out_mask.data, mask.data)

    def test_geometric_preserves_class_histogram(self):
        chip, mask = sample_pair(3)
        cfg = AugmentConfig(apply_probability=1.0, enable_photometric=False,
                            resize_scale_range=(1.0, 1.0))
        for s in range(10):
            _, out_mask = augment_pair(chip, mask, cfg, stream(s))
            assert out_mask.class_counts() == mask.class_counts()

    @pytest.mark.parametrize("scale", [0.85, 1.1])
    def test_resize_preserves_class_proportions_on_stationary_mask(self, scale):
        # iid random mask: every class >= 100 px, spatially stationary
        rng = np.random.default_rng(5)
        chip = Chip(rng.uniform(0, 1, (2, 64, 64)))
        mask = LabelMask(rng.integers(0, 3, (64, 64)).astype(np.uint8))
        _, out = geometric_transform(chip, mask, "resize", scale)
        valid = out.data != IGNORE
        for cls in (0, 1, 2):
            before = (mask.data == cls).mean()
            after = (out.data[valid] == cls).mean()
            assert abs(after - before) < 0.02


class TestGeometric:
    def test_double_flip_is_identity(self):
        chip, mask = sample_pair()
        for kind in ("flip-h", "flip-v", "flip-diag"):
            c1, m1 = geometric_transform(chip, mask, kind)
            c2, m2 = geometric_transform(c1, m1, kind)
            assert np.array_equal(c2.data, chip.data)
            assert np.array_equal(m2.data, mask.data)

    def test_four_quarter_turns_identity(self):
        chip, mask = sample_pair()
        c, m = chip, mask
        for _ in range(4):
            c, m = geometric_transform(c, m, "rotate90k", 1)
        assert np.array_equal(c.data, chip.data)
        assert np.array_equal(m.data, mask.data)

    def test_diagonal_flip_is_transpose(self):
        chip, mask = sample_pair()
        c, m = geometric_transform(chip, mask, "flip-diag")
        assert np.array_equal(c.data, chip.data.transpose(0, 2, 1))
        assert np.array_equal(m.data, mask.data.T)

    def test_resize_unit_scale_is_identity(self):
        chip, mask = sample_pair()
        c, m = geometric_transform(chip, mask, "resize", 1.0)
        assert np.abs(c.data - chip.data).max() < 1e-7
        assert np.array_equal(m.data, mask.data)

    def test_resize_down_pads_mask_with_ignore(self):
        chip, mask = sample_pair()
        _, m = geometric_transform(chip, mask, "resize", 0.8)
        assert m.data.shape == mask.data.shape
        assert (m.data[0, :] == IGNORE).all()

    def test_unknown_kind_rejected(self):
        chip, mask = sample_pair()
        with pytest.raises(ConfigError):
            geometric_transform(chip, mask, "shear")


class TestPhotometric:
    def test_gamma_one_is_identity(self):
        chip, _ = sample_pair()
        out = photometric_transform(chip, "gamma", 1.0)
        assert np.abs(out.data - chip.data).max() < 1e-12

    def test_identity_parameters_compose_to_identity(self):
        chip, _ = sample_pair()
        out = photometric_transform(chip, "gamma", 1.0)
        out = photometric_transform(out, "additive", 0.0)
        out = photometric_transform(out, "multiplicative", 1.0)
        assert np.abs(out.data - chip.data).max() < 1e-12

    def test_additive_arithmetic(self):
        chip = Chip(np.full((4, 16, 16), 0.5))
        out = photometric_transform(chip, "additive", 0.05)
        assert np.allclose(out.data, 0.55)

    def test_gaussian_noise_sample_std(self):
        chip = Chip(np.full((1, 100, 100), 0.5))
        out = photometric_transform(chip, "gaussian-noise", 0.02, stream(9))
        delta = out.data - 0.5
        assert 0.018 < delta.std() < 0.022

    def test_clamped_to_unit_interval(self):
        chip = Chip(np.full((2, 8, 8), 0.98))
        out = photometric_transform(chip, "additive", 0.1)
        assert out.data.max() <= 1.0

    def test_gamma_on_negative_values_rejected(self):
        chip = Chip(np.full((1, 4, 4), -0.1))
        with pytest.raises(DataError):
            photometric_transform(chip, "gamma", 1.2)

    def test_monotone_transforms_preserve_argmax_structure(self):
        rng = np.random.default_rng(10)
        chip = Chip(rng.uniform(0.2, 0.8, (1, 32, 32)))
        region = chip.data[0] > 0.5
        for kind, param in (("gamma", 1.3), ("additive", 0.04), ("multiplicative", 1.05)):
            out = photometric_transform(chip, kind, param)
            assert ((out.data[0] > np.median(out.data[0])) == (chip.data[0] > np.median(chip.data[0]))).mean() > 0.99
        assert region.any()
