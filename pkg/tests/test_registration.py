"""Tests for the registration and propagation module."""

import os
import unittest

import numpy as np
import torch

from slicecollab.core.metrics import slice_dsc_profile
from slicecollab.core.nets import SegNetConfig, build_registration_net
from slicecollab.core.phantom import PhantomConfig, generate_phantom_dataset
from slicecollab.core.registration import (
    DisplacementField,
    RegistrationConfig,
    adjacent_pairs,
    default_registration_optimizer,
    predict_fields,
    propagate_labels,
    propagation_pairs,
    registration_loss,
    train_registration,
    warp,
)
from slicecollab.core.training import OptimizerSettings
from slicecollab.core.volume import (
    LabelSource,
    SparseAnnotatedVolume,
    Volume,
    normalize,
)
from slicecollab.errors import ConfigError, ShapeMismatchError

TINY_NET = SegNetConfig(base_kernels=2, depth=1)
SMALL_OBJECTS = PhantomConfig(radius_range_px=(3.0, 5.0))


def _brute_force_shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = mask[y + dy, x + dx], zero outside the image."""
    out = np.zeros_like(mask)
    height, width = mask.shape
    for y in range(height):
        for x in range(width):
            sy, sx = y + dy, x + dx
            if 0 <= sy < height and 0 <= sx < width:
                out[y, x] = mask[sy, sx]
    return out


class TestWarp(unittest.TestCase):
    """Resampling through displacement fields."""

    def setUp(self):
        """Build a random 8x8 mask."""
        self.mask = np.random.default_rng(0).integers(0, 2, size=(8, 8))
        self.mask = self.mask.astype(np.uint8)

    def test_zero_field_is_identity(self):
        zero = DisplacementField(np.zeros((2, 8, 8)))
        np.testing.assert_array_equal(warp(self.mask, zero, "label"), self.mask)
        image = np.random.default_rng(1).normal(size=(8, 8))
        np.testing.assert_array_equal(warp(image, zero), image)

    def test_constant_shift_matches_brute_force(self):
        """A field of (0, -1) moves content one pixel along +x."""
        field = DisplacementField.constant((8, 8), 0.0, -1.0)
        expected = _brute_force_shift(self.mask, 0, -1)
        np.testing.assert_array_equal(warp(self.mask, field, "label"), expected)
        np.testing.assert_allclose(
            warp(self.mask.astype(np.float64), field), expected, atol=1e-9
        )

    def test_vertical_shift_matches_brute_force(self):
        field = DisplacementField.constant((8, 8), 2.0, 0.0)
        expected = _brute_force_shift(self.mask, 2, 0)
        np.testing.assert_array_equal(warp(self.mask, field, "label"), expected)

    def test_half_pixel_shift_interpolates(self):
        image = np.zeros((8, 8))
        image[:, 4] = 1.0
        field = DisplacementField.constant((8, 8), 0.0, 0.5)
        warped = warp(image, field)
        np.testing.assert_allclose(warped[:, 3], 0.5)
        np.testing.assert_allclose(warped[:, 4], 0.5)

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            DisplacementField(np.zeros((3, 8, 8)))
        with self.assertRaises(ValueError):
            DisplacementField(np.full((2, 8, 8), np.inf))
        with self.assertRaises(ValueError):
            warp(self.mask, np.zeros((2, 8, 8)), "nearest")
        with self.assertRaises(ShapeMismatchError):
            warp(self.mask, np.zeros((2, 8, 9)))


class TestRegistrationLoss(unittest.TestCase):
    """Similarity and smoothness terms."""

    def test_identical_slices_and_zero_field(self):
        images = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        field = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
        total, similarity, smoothness = registration_loss(images, images, field, 0.01)
        self.assertAlmostEqual(total.item(), 0.0, places=12)
        self.assertAlmostEqual(similarity.item(), 0.0, places=12)
        self.assertEqual(smoothness.item(), 0.0)

    def test_smoothness_of_linear_field(self):
        """A dy ramp of 0.1 per column gives mean squared x-gradient 0.01 / 2."""
        field = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
        field[0, 0] = 0.1 * torch.arange(8, dtype=torch.float64)[None, :]
        images = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        total, _, smoothness = registration_loss(images, images, field, 2.0)
        self.assertAlmostEqual(smoothness.item(), 0.005, places=12)
        self.assertAlmostEqual(total.item(), 0.01, places=12)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            RegistrationConfig(smoothness_weight=-1.0)
        with self.assertRaises(ConfigError):
            RegistrationConfig(label_threshold=1.0)
        with self.assertRaises(ConfigError):
            RegistrationConfig.from_dict({"lambda": 0.1})

    def test_default_optimizer(self):
        opt = default_registration_optimizer()
        self.assertEqual((opt.lr, opt.batch_size, opt.epochs), (0.01, 32, 100))


class TestPropagation(unittest.TestCase):
    """Chained propagation of the central label."""

    def test_propagation_pairs(self):
        self.assertEqual(propagation_pairs(3), [(1, 2), (1, 0)])
        self.assertEqual(
            propagation_pairs(6), [(3, 4), (4, 5), (3, 2), (2, 1), (1, 0)]
        )
        self.assertEqual(len(propagation_pairs(15)), 14)

    def test_adjacent_pairs_cover_both_directions(self):
        volume = Volume(np.arange(4)[:, None, None] * np.ones((4, 8, 8)))
        pairs = adjacent_pairs(volume)
        self.assertEqual(pairs.shape, (6, 2, 8, 8))
        np.testing.assert_array_equal(pairs[0, :, 0, 0], [0, 1])
        np.testing.assert_array_equal(pairs[1, :, 0, 0], [1, 0])

    def test_identity_registration_copies_central_label(self):
        """An untrained network predicts zero fields, so labels repeat."""
        torch.manual_seed(0)
        config = PhantomConfig(
            noise_sigma=0.0, max_drift_px=0.0, radius_range_px=(3.0, 5.0)
        )
        ((volume, labels),) = generate_phantom_dataset(1, (7, 20, 20), 0, config)
        item = SparseAnnotatedVolume.from_dense(normalize(volume), labels)
        net = build_registration_net(TINY_NET)
        propagated = propagate_labels(net, item)
        self.assertEqual(propagated.source, LabelSource.SSL)
        self.assertTrue(propagated.covered.all())
        for mask in propagated.masks:
            np.testing.assert_array_equal(mask, item.central_label.pixels)


class TestTrainRegistration(unittest.TestCase):
    """Unsupervised training of the registration network."""

    def setUp(self):
        """Build a tiny dataset."""
        cases = generate_phantom_dataset(2, (5, 16, 16), 0, SMALL_OBJECTS)
        self.volumes = [normalize(volume) for volume, _ in cases]

    def test_training_records_history(self):
        records = []
        opt = OptimizerSettings(lr=1e-3, batch_size=8, epochs=2)
        checkpoint = train_registration(
            self.volumes, opt, net_config=TINY_NET, callback=records.append
        )
        self.assertEqual(checkpoint.epoch, 2)
        self.assertEqual(records, checkpoint.loss_history)
        for record in records:
            self.assertEqual(
                set(record), {"epoch", "loss", "similarity", "smoothness"}
            )
        fields_ = predict_fields(
            checkpoint.net, self.volumes[0].voxels[:-1], self.volumes[0].voxels[1:]
        )
        self.assertEqual(fields_.shape, (4, 2, 16, 16))
        self.assertTrue(np.isfinite(fields_).all())

    def test_epochs_override(self):
        opt = OptimizerSettings(lr=1e-3, batch_size=8, epochs=5)
        checkpoint = train_registration(
            self.volumes, opt, epochs=1, net_config=TINY_NET
        )
        self.assertEqual(len(checkpoint.loss_history), 1)

    def test_invalid_datasets(self):
        with self.assertRaises(ValueError):
            train_registration([])
        mixed = self.volumes + [Volume(np.zeros((5, 8, 8)))]
        with self.assertRaises(ValueError):
            train_registration(mixed, net_config=TINY_NET)

    @unittest.skipUnless(os.environ.get("SLICECOLLAB_SLOW"), "slow training test")
    def test_recovers_constant_translation(self):
        """A +1 px/slice x-translation is recovered inside the object."""
        config = PhantomConfig(translation_px=(0.0, 1.0), noise_sigma=0.0)
        cases = generate_phantom_dataset(8, (9, 48, 48), 0, config)
        volumes = [normalize(v) for v, _ in cases]
        checkpoint = train_registration(
            volumes,
            OptimizerSettings(lr=1e-3, batch_size=16, epochs=60),
            net_config=SegNetConfig(base_kernels=8, depth=3),
        )
        volume, labels = volumes[0], cases[0][1]
        fields_ = predict_fields(
            checkpoint.net, volume.voxels[1:], volume.voxels[:-1]
        )
        inside = labels.masks[:-1].astype(bool)
        self.assertAlmostEqual(fields_[:, 1][inside].mean(), 1.0, delta=0.3)

    @unittest.skipUnless(os.environ.get("SLICECOLLAB_SLOW"), "slow training test")
    def test_propagated_labels_degrade_with_distance(self):
        """Propagation stays accurate near the center and decays outward."""
        cases = generate_phantom_dataset(10, (17, 64, 64), 0)
        items = [
            SparseAnnotatedVolume.from_dense(normalize(volume), labels)
            for volume, labels in cases
        ]
        checkpoint = train_registration(
            [item.volume for item in items], default_registration_optimizer(), 15
        )
        by_distance = {}
        for item, (_, labels) in zip(items, cases):
            propagated = propagate_labels(checkpoint.net, item)
            profile = slice_dsc_profile(propagated.masks, labels.masks, 8)
            for distance, value in profile.by_distance.items():
                by_distance.setdefault(distance, []).append(value)
        means = [float(np.mean(by_distance[d])) for d in sorted(by_distance)]
        for distance in range(1, 5):
            self.assertGreater(means[distance], 0.85, distance)
        for nearer, farther in zip(means, means[1:]):
            self.assertLessEqual(farther, nearer + 0.02)


if __name__ == "__main__":
    unittest.main()
