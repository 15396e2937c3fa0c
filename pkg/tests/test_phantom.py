"""Tests for the phantom generator."""

import unittest

import numpy as np

from slicecollab.core.phantom import (
    ObjectGeometry,
    PhantomConfig,
    clean_threshold,
    generate_phantom_dataset,
    object_masks,
    render_clean,
)
from slicecollab.core.volume import LabelSource
from slicecollab.errors import ConfigError


class TestPhantom(unittest.TestCase):
    """Test cases for synthetic phantom generation."""

    def test_same_seed_is_bit_identical(self):
        first = generate_phantom_dataset(3, (7, 32, 32), 11)
        second = generate_phantom_dataset(3, (7, 32, 32), 11)
        for (v1, l1), (v2, l2) in zip(first, second):
            np.testing.assert_array_equal(v1.voxels, v2.voxels)
            np.testing.assert_array_equal(l1.masks, l2.masks)
            self.assertEqual(v1.case_id, v2.case_id)

    def test_different_seeds_differ(self):
        ((v1, _),) = generate_phantom_dataset(1, (7, 32, 32), 1)
        ((v2, _),) = generate_phantom_dataset(1, (7, 32, 32), 2)
        self.assertFalse(np.array_equal(v1.voxels, v2.voxels))

    def test_static_phantom_repeats_central_mask(self):
        """Without noise or drift every slice mask equals the central one."""
        config = PhantomConfig(noise_sigma=0.0, max_drift_px=0.0)
        cases = generate_phantom_dataset(2, (9, 48, 48), 5, config)
        for volume, labels in cases:
            center = labels.masks[4]
            self.assertGreater(center.sum(), 0)
            for mask in labels.masks:
                np.testing.assert_array_equal(mask, center)
            self.assertEqual(labels.source, LabelSource.MANUAL)
            self.assertEqual(volume.shape, (9, 48, 48))

    def test_translation_phantom_shifts_by_fixed_step(self):
        config = PhantomConfig(translation_px=(0.0, 1.0), noise_sigma=0.0)
        ((_, labels),) = generate_phantom_dataset(1, (7, 64, 64), 0, config)
        shifted = np.roll(labels.masks[3], 1, axis=1)
        np.testing.assert_array_equal(labels.masks[4], shifted)

    def test_object_stays_inside_field_of_view(self):
        config = PhantomConfig(max_drift_px=3.0)
        for _, labels in generate_phantom_dataset(5, (17, 32, 32), 8, config):
            self.assertFalse(labels.masks[:, 0, :].any())
            self.assertFalse(labels.masks[:, -1, :].any())
            self.assertFalse(labels.masks[:, :, 0].any())
            self.assertFalse(labels.masks[:, :, -1].any())

    def test_clean_rendering_thresholds_to_mask(self):
        geometry = ObjectGeometry(
            np.full(3, 15.5), np.full(3, 15.5), np.full(3, 6.0), np.full(3, 9.0)
        )
        masks = object_masks(geometry, 32, 32)
        config = PhantomConfig()
        clean = render_clean(masks, config)
        np.testing.assert_array_equal(clean > clean_threshold(config), masks == 1)

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            PhantomConfig(count=0)
        with self.assertRaises(ConfigError):
            PhantomConfig(radius_range_px=(5.0, 2.0))
        with self.assertRaises(ConfigError):
            PhantomConfig.from_dict({"colour": "red"})


if __name__ == "__main__":
    unittest.main()
