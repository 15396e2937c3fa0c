"""Tests for the metrics module."""

import itertools
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from slicecollab.core.metrics import (
    METRIC_NAMES,
    MetricsReport,
    assd,
    b_iou,
    boundary_extract,
    compare_reports,
    confusion_counts,
    default_band_px,
    dsc,
    evaluate_case,
    evaluate_cases,
    paired_t_test,
    pseudo_label_quality,
    ravd,
    slice_dsc_profile,
)
from slicecollab.core.volume import DenseLabelVolume, LabelSource
from slicecollab.errors import MetricUndefinedError, ShapeMismatchError

NEIGHBORS_6 = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
]


def _brute_surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background or out-of-volume 6-neighbor."""
    surface = np.zeros_like(mask, dtype=bool)
    for index in zip(*np.nonzero(mask)):
        for offset in NEIGHBORS_6:
            neighbor = tuple(i + o for i, o in zip(index, offset))
            inside = all(0 <= n < s for n, s in zip(neighbor, mask.shape))
            if not inside or not mask[neighbor]:
                surface[index] = True
                break
    return surface


def _brute_band(surface: np.ndarray, radius: int) -> np.ndarray:
    band = np.zeros_like(surface)
    points = list(zip(*np.nonzero(surface)))
    for index in itertools.product(*(range(s) for s in surface.shape)):
        if any(max(abs(a - b) for a, b in zip(index, p)) <= radius for p in points):
            band[index] = True
    return band


def _brute_assd(pred: np.ndarray, gt: np.ndarray, spacing) -> float:
    spacing = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(_brute_surface(pred)) * spacing
    b = np.argwhere(_brute_surface(gt)) * spacing
    a_to_b = [min(np.linalg.norm(p - q) for q in b) for p in a]
    b_to_a = [min(np.linalg.norm(q - p) for p in a) for q in b]
    return (sum(a_to_b) + sum(b_to_a)) / (len(a_to_b) + len(b_to_a))


class TestBoundary(unittest.TestCase):
    """Surface extraction and boundary IoU."""

    def test_solid_cube_surface(self):
        mask = np.zeros((5, 5, 5), dtype=np.uint8)
        mask[1:4, 1:4, 1:4] = 1
        surface = boundary_extract(mask)
        self.assertEqual(int(surface.sum()), 26)
        self.assertFalse(surface[2, 2, 2])

    def test_single_voxel(self):
        mask = np.zeros((3, 3, 3), dtype=np.uint8)
        mask[1, 1, 1] = 1
        np.testing.assert_array_equal(boundary_extract(mask), mask.astype(bool))

    def test_volume_faces_count_as_background(self):
        surface = boundary_extract(np.ones((3, 3, 3)))
        self.assertEqual(int(surface.sum()), 26)

    def test_random_mask_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            mask = rng.integers(0, 2, size=(4, 8, 8))
            np.testing.assert_array_equal(boundary_extract(mask), _brute_surface(mask))

    def test_band_matches_brute_force(self):
        mask = np.zeros((3, 8, 8), dtype=np.uint8)
        mask[1, 2:5, 2:5] = 1
        expected = _brute_band(_brute_surface(mask), 1)
        np.testing.assert_array_equal(boundary_extract(mask, 1), expected)

    def test_b_iou_examples(self):
        mask = np.zeros((3, 16, 16), dtype=np.uint8)
        mask[1, 4:9, 4:9] = 1
        self.assertEqual(b_iou(mask, mask), 1.0)
        empty = np.zeros((3, 16, 16), dtype=np.uint8)
        self.assertEqual(b_iou(empty, empty), 1.0)

        far = np.zeros((1, 40, 40), dtype=np.uint8)
        near = far.copy()
        far[0, 1:3, 1:3] = 1
        near[0, 35:38, 35:38] = 1
        self.assertEqual(b_iou(far, near), 0.0)

    def test_b_iou_squares_match_set_computation(self):
        small = np.zeros((3, 10, 10), dtype=np.uint8)
        large = small.copy()
        small[1, 2:5, 2:5] = 1
        large[1, 2:6, 2:6] = 1
        a = _brute_band(_brute_surface(small), 1)
        b = _brute_band(_brute_surface(large), 1)
        expected = (a & b).sum() / (a | b).sum()
        self.assertAlmostEqual(b_iou(small, large, band_px=1), expected, places=12)
        self.assertEqual(b_iou(small, large, 1), b_iou(large, small, 1))

    def test_default_band(self):
        self.assertEqual(default_band_px((17, 64, 64)), 2)
        self.assertEqual(default_band_px((3, 8, 8)), 1)

    def test_negative_band(self):
        with self.assertRaises(ValueError):
            boundary_extract(np.ones((3, 3, 3)), -1)


class TestOverlapMetrics(unittest.TestCase):
    """DSC and RAVD."""

    def test_dsc_substitution(self):
        pred = np.array([1, 1, 1, 0, 0], dtype=np.uint8)
        gt = np.array([1, 1, 0, 1, 0], dtype=np.uint8)
        self.assertEqual(confusion_counts(pred, gt), (2, 1, 1))
        self.assertAlmostEqual(dsc(pred, gt), 4 / 6)

    def test_dsc_conventions(self):
        mask = np.eye(4, dtype=np.uint8)
        self.assertEqual(dsc(mask, mask), 1.0)
        self.assertEqual(dsc(np.zeros(4), np.zeros(4)), 1.0)

    def test_dsc_random_pairs_match_counting(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = rng.integers(0, 2, size=(3, 6, 6))
            gt = rng.integers(0, 2, size=(3, 6, 6))
            tp = fp = fn = 0
            for p, g in zip(pred.ravel(), gt.ravel()):
                tp += p and g
                fp += p and not g
                fn += g and not p
            expected = 2 * tp / (2 * tp + fp + fn)
            self.assertAlmostEqual(dsc(pred, gt), expected, delta=1e-12)
            self.assertEqual(dsc(pred, gt), dsc(gt, pred))

    def test_ravd(self):
        gt = np.array([1] * 10 + [0] * 10, dtype=np.uint8)
        pred = np.array([1] * 8 + [0] * 2 + [1] * 4 + [0] * 6, dtype=np.uint8)
        self.assertEqual(confusion_counts(pred, gt), (8, 4, 2))
        self.assertAlmostEqual(ravd(pred, gt), 0.2)
        balanced = np.array([1] * 9 + [0] + [1] + [0] * 9, dtype=np.uint8)
        self.assertEqual(ravd(balanced, gt), 0.0)

    def test_ravd_empty_ground_truth(self):
        with self.assertRaises(MetricUndefinedError):
            ravd(np.ones(4), np.zeros(4))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            dsc(np.zeros((2, 2)), np.zeros((2, 3)))


class TestAssd(unittest.TestCase):
    """Average symmetric surface distance."""

    def test_identical_masks(self):
        mask = np.zeros((4, 8, 8), dtype=np.uint8)
        mask[1:3, 2:6, 2:6] = 1
        self.assertEqual(assd(mask, mask), 0.0)

    def test_scaled_single_voxels(self):
        pred = np.zeros((3, 8, 8), dtype=np.uint8)
        gt = pred.copy()
        pred[1, 4, 1] = 1
        gt[1, 4, 4] = 1
        self.assertAlmostEqual(assd(pred, gt, (1.0, 1.0, 0.5)), 1.5)

    def test_random_masks_match_all_pairs(self):
        rng = np.random.default_rng(2)
        spacing = (2.0, 0.7, 1.3)
        for _ in range(3):
            pred = rng.integers(0, 2, size=(3, 5, 5))
            gt = rng.integers(0, 2, size=(3, 5, 5))
            expected = _brute_assd(pred, gt, spacing)
            self.assertAlmostEqual(assd(pred, gt, spacing), expected, delta=1e-9)
            self.assertAlmostEqual(
                assd(pred, gt, spacing), assd(gt, pred, spacing), delta=1e-12
            )

    def test_empty_mask(self):
        mask = np.ones((3, 4, 4))
        with self.assertRaises(MetricUndefinedError):
            assd(np.zeros((3, 4, 4)), mask)
        with self.assertRaises(MetricUndefinedError):
            assd(mask, np.zeros((3, 4, 4)))


class TestPairedTTest(unittest.TestCase):
    """Two-tailed paired t-test."""

    def test_reference_values(self):
        result = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        self.assertAlmostEqual(result.t, 2 * math.sqrt(3), places=9)
        self.assertAlmostEqual(result.p, 1 - 2 * math.sqrt(3) / math.sqrt(14))
        self.assertAlmostEqual(result.p, 0.0742, places=4)
        self.assertTrue(result.defined)

    def test_sign_flip_and_swap(self):
        a = [0.81, 0.75, 0.9, 0.66, 0.7]
        b = [0.78, 0.77, 0.85, 0.6, 0.69]
        forward = paired_t_test(a, b)
        backward = paired_t_test(b, a)
        self.assertAlmostEqual(forward.t, -backward.t)
        self.assertAlmostEqual(forward.p, backward.p)
        self.assertTrue(0 < forward.p <= 1)

    def test_null_case(self):
        a = np.linspace(0.5, 0.9, 6)
        b = a + 1e-6 * np.array([1, -1, 1, -1, 1, -1])
        result = paired_t_test(a, b)
        self.assertLess(abs(result.t), 1.0)
        self.assertGreater(result.p, 0.5)

    def test_zero_variance_is_undefined(self):
        result = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
        self.assertTrue(math.isnan(result.p))
        self.assertFalse(result.defined)

    def test_invalid_samples(self):
        with self.assertRaises(ValueError):
            paired_t_test([1.0], [2.0])
        with self.assertRaises(ValueError):
            paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


class TestReports(unittest.TestCase):
    """Per-case reports, summaries and comparisons."""

    def setUp(self):
        """Build two cases, one with an empty prediction."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        gt = np.zeros((3, 8, 8), dtype=np.uint8)
        gt[:, 2:6, 2:6] = 1
        self.gt = {"a": gt, "b": gt}
        shifted = np.zeros_like(gt)
        shifted[:, 3:7, 2:6] = 1
        self.pred = {"a": shifted, "b": np.zeros_like(gt)}

    def tearDown(self):
        """Clean up the temporary directory."""
        self.temp_dir.cleanup()

    def test_evaluate_case_flags_undefined_metrics(self):
        metrics = evaluate_case("b", self.pred["b"], self.gt["b"])
        self.assertIsNone(metrics.assd_mm)
        self.assertEqual(metrics.ravd, 1.0)
        self.assertEqual(metrics.dsc, 0.0)
        self.assertEqual(metrics.flags, ["assd_mm_undefined"])

    def test_summary_excludes_undefined_values(self):
        report = evaluate_cases("m", self.pred, self.gt)
        self.assertEqual([c.case_id for c in report.per_case], ["a", "b"])
        summary = report.summary
        self.assertEqual(summary["assd_mm"]["n"], 1)
        self.assertEqual(summary["assd_mm"]["undefined"], 1)
        self.assertEqual(summary["assd_mm"]["sd"], 0.0)
        self.assertAlmostEqual(summary["dsc"]["mean"], 0.75 / 2)
        self.assertAlmostEqual(
            summary["dsc"]["sd"], float(np.std([0.75, 0.0], ddof=1))
        )

    def test_case_sets_must_match(self):
        with self.assertRaises(ValueError):
            evaluate_cases("m", {"a": self.pred["a"]}, self.gt)

    def test_save_and_load(self):
        report = evaluate_cases("m", self.pred, self.gt)
        report.comparisons = [{"metric": "dsc", "p_value": float("nan")}]
        path = self.root / "report.json"
        report.save(path)
        loaded = MetricsReport.load(path)
        self.assertEqual(loaded.method, "m")
        self.assertEqual(loaded.values("dsc"), report.values("dsc"))
        self.assertIsNone(loaded.comparisons[0]["p_value"])
        self.assertEqual(loaded.per_case[1].flags, ["assd_mm_undefined"])

    def test_csv_has_one_row_per_case(self):
        report = evaluate_cases("m", self.pred, self.gt)
        path = self.root / "per_case.csv"
        report.write_csv(path)
        frame = pd.read_csv(path)
        self.assertEqual(
            list(frame.columns), ["method", "case_id", *METRIC_NAMES, "flags"]
        )
        self.assertEqual(len(frame), 2)

    def test_compare_reports(self):
        first = MetricsReport.from_dict(
            {
                "method": "x",
                "per_case": [
                    {"case_id": str(i), "b_iou": 0.5, "dsc": d}
                    for i, d in enumerate([0.9, 0.8, 0.85])
                ],
            }
        )
        second = MetricsReport.from_dict(
            {
                "method": "y",
                "per_case": [
                    {"case_id": str(i), "b_iou": 0.5, "dsc": d}
                    for i, d in enumerate([0.8, 0.6, 0.55])
                ],
            }
        )
        rows = {row["metric"]: row for row in compare_reports([first, second])}
        self.assertEqual(set(rows), set(METRIC_NAMES))
        self.assertTrue(rows["dsc"]["defined"])
        self.assertEqual(rows["dsc"]["n"], 3)
        expected = paired_t_test([0.9, 0.8, 0.85], [0.8, 0.6, 0.55])
        self.assertAlmostEqual(rows["dsc"]["p_value"], expected.p)
        self.assertFalse(rows["b_iou"]["defined"])
        self.assertEqual(rows["assd_mm"]["n"], 0)


class TestSliceProfiles(unittest.TestCase):
    """Per-slice quality diagnostics."""

    def test_dsc_by_distance(self):
        gt = np.zeros((5, 4, 4), dtype=np.uint8)
        gt[:, 1:3, 1:3] = 1
        pred = gt.copy()
        pred[0] = 0
        profile = slice_dsc_profile(pred, gt, 2)
        self.assertEqual(profile.per_slice, [0.0, 1.0, 1.0, 1.0, 1.0])
        self.assertEqual(profile.by_distance, {0: 1.0, 1: 1.0, 2: 0.5})

    def test_pseudo_label_quality_uses_covered_slices(self):
        gt = np.ones((3, 4, 4), dtype=np.uint8)
        labels = DenseLabelVolume(gt, LabelSource.SEMI, [True, False, True])
        self.assertEqual(pseudo_label_quality(labels, gt), 1.0)
        nothing = DenseLabelVolume(gt, LabelSource.SEMI, [False, False, False])
        self.assertIsNone(pseudo_label_quality(nothing, gt))


if __name__ == "__main__":
    unittest.main()
