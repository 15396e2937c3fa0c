"""Tests for configuration, splits, artifacts and the experiment runner."""

import json
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from slicecollab.core.metrics import METRIC_NAMES, MetricsReport
from slicecollab.core.nets import load_checkpoint
from slicecollab.core.phantom import PhantomConfig, generate_phantom_dataset
from slicecollab.core.volume import DenseLabelVolume, LabelSource, load_mask
from slicecollab.errors import ConfigError, StageError, VolumeFormatError
from slicecollab.pipeline.artifacts import (
    MANIFEST_NAME,
    ArtifactStore,
    load_dataset,
    write_dataset,
)
from slicecollab.pipeline.config import (
    ExperimentConfig,
    ExperimentMode,
    config_hash,
    load_config,
)
from slicecollab.pipeline.runner import (
    STAGES,
    load_cases,
    method_name,
    run_pipeline,
    run_stage,
    run_sweep,
    stage_seed,
)
from slicecollab.pipeline.splits import annotated_slice_indices, split_dataset

SMALL_OBJECTS = PhantomConfig(radius_range_px=(3.0, 5.0))


def tiny_config(out_dir, **overrides) -> ExperimentConfig:
    """A config small enough to run every stage in seconds."""
    data = {
        "seed": 0,
        "out_dir": str(out_dir),
        "mode": "fs_lcs",
        "split": "fixed_80_20",
        "network": {"base_kernels": 2, "depth": 1},
        "phantom": {
            "count": 5,
            "shape": [5, 16, 16],
            "radius_range_px": [3.0, 5.0],
        },
        "semi": {"epochs": 3, "batch_size": 4, "lr": 1e-3},
        "semi_loss": {"K1": 1, "K2": 2},
        "registration": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
        "target": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
    }
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


class TestExperimentConfig(unittest.TestCase):
    """Parsing and validation of experiment configs."""

    def setUp(self):
        """Set up a temporary directory."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        """Clean up the temporary directory."""
        self.temp_dir.cleanup()

    def test_defaults(self):
        cfg = ExperimentConfig()
        self.assertEqual(cfg.mode, ExperimentMode.PIPELINE)
        self.assertEqual((cfg.registration.lr, cfg.registration.batch_size), (0.01, 32))
        self.assertEqual(cfg.target.lr_decay_step, 30)
        self.assertEqual(cfg.semi.epochs, 120)
        self.assertEqual(cfg.sweep.alpha_values, [0.1, 0.5, 1, 3, 5, 7, 9])
        self.assertEqual(cfg.sweep.slice_budgets, [2, 3, 5, 6, 7])

    def test_partial_optimizer_section_keeps_stage_defaults(self):
        cfg = ExperimentConfig.from_dict({"registration": {"epochs": 5}})
        self.assertEqual(cfg.registration.epochs, 5)
        self.assertEqual(cfg.registration.lr, 0.01)
        self.assertEqual(cfg.registration.batch_size, 32)

    def test_unknown_keys_are_rejected(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"sed": 1})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"network": {"layers": 3}})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"target": {"momentum": 0.9}})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"semi_loss": [1, 2]})

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"mode": "co_training"})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"split": "three_fold"})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"semi_loss": {"K1": 10, "K2": 5}})
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"sweep": {"fusion_modes": ["vote"]}})
        with self.assertRaises(ConfigError):
            ExperimentConfig(max_folds=0)

    def test_validate(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig(data_dir=str(self.root / "missing")).validate()
        empty_sweep = ExperimentConfig.from_dict(
            {"mode": "alpha_sweep", "sweep": {"alpha_values": []}}
        )
        with self.assertRaises(ConfigError):
            empty_sweep.validate()

    def test_round_trip_and_hash(self):
        cfg = tiny_config(self.root)
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        self.assertEqual(config_hash(cfg), config_hash(again))
        self.assertNotEqual(config_hash(cfg), config_hash(cfg.replace(seed=1)))
        self.assertEqual(len(config_hash(cfg)), 64)

    def test_load_config(self):
        path = self.root / "config.json"
        path.write_text(json.dumps({"seed": 4, "mode": "fs"}), encoding="utf-8")
        cfg = load_config(path)
        self.assertEqual(cfg.seed, 4)
        self.assertEqual(cfg.mode, ExperimentMode.FS)
        with self.assertRaises(ConfigError):
            load_config(self.root / "absent.json")
        path.write_text("{not json", encoding="utf-8")
        with self.assertRaises(ConfigError):
            load_config(path)


class TestSplits(unittest.TestCase):
    """Train/test splits and annotated slice positions."""

    def test_five_fold(self):
        cases = [f"case_{i:02d}" for i in range(50)]
        folds = split_dataset(cases, "five_fold", seed=3)
        self.assertEqual(len(folds), 5)
        seen = []
        for fold in folds:
            self.assertEqual(len(fold.test), 10)
            self.assertEqual(len(fold.train), 40)
            self.assertFalse(set(fold.train) & set(fold.test))
            seen.extend(fold.test)
        self.assertEqual(sorted(seen), cases)

    def test_fixed_80_20(self):
        cases = [f"c{i}" for i in range(100)]
        (fold,) = split_dataset(cases, "fixed_80_20", seed=0)
        self.assertEqual((len(fold.train), len(fold.test)), (80, 20))
        self.assertEqual(sorted(fold.train + fold.test), sorted(cases))

    def test_seeded_shuffle(self):
        cases = [str(i) for i in range(20)]
        first = split_dataset(cases, "five_fold", seed=1)
        self.assertEqual(first, split_dataset(list(reversed(cases)), "five_fold", 1))
        self.assertNotEqual(first, split_dataset(cases, "five_fold", seed=2))

    def test_too_few_cases(self):
        with self.assertRaises(ValueError):
            split_dataset(["a", "b", "c"], "five_fold", seed=0)
        with self.assertRaises(ValueError):
            split_dataset(["a"], "fixed_80_20", seed=0)
        with self.assertRaises(ValueError):
            split_dataset(["a", "a", "b", "c", "d"], "five_fold", seed=0)

    def test_annotated_slice_indices(self):
        self.assertEqual(annotated_slice_indices(17, 1), [8])
        self.assertEqual(annotated_slice_indices(17, 3), [4, 8, 12])
        self.assertEqual(annotated_slice_indices(5, 5), [0, 1, 2, 3, 4])
        self.assertEqual(annotated_slice_indices(7, 6), [1, 2, 3, 4, 5, 6])
        for k in range(1, 8):
            indices = annotated_slice_indices(15, k)
            self.assertEqual(len(set(indices)), k)
            self.assertIn(7, indices)
        with self.assertRaises(ValueError):
            annotated_slice_indices(5, 0)
        with self.assertRaises(ValueError):
            annotated_slice_indices(5, 6)


class TestArtifacts(unittest.TestCase):
    """Dataset directories and the artifact store."""

    def setUp(self):
        """Set up a temporary directory."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        """Clean up the temporary directory."""
        self.temp_dir.cleanup()

    def test_dataset_round_trip(self):
        cases = generate_phantom_dataset(2, (5, 16, 16), 0, SMALL_OBJECTS)
        self.assertEqual(write_dataset(cases, self.root), 2)
        loaded = load_dataset(self.root)
        self.assertEqual([v.case_id for v, _ in loaded], ["phantom_000", "phantom_001"])
        for (volume, labels), (original, original_labels) in zip(loaded, cases):
            np.testing.assert_array_equal(volume.voxels, original.voxels)
            np.testing.assert_array_equal(labels.masks, original_labels.masks)

    def test_missing_labels(self):
        cases = generate_phantom_dataset(1, (5, 16, 16), 0, SMALL_OBJECTS)
        write_dataset(cases, self.root)
        (self.root / "labels" / "phantom_000.msk").unlink()
        with self.assertRaises(VolumeFormatError):
            load_dataset(self.root)
        with self.assertRaises(VolumeFormatError):
            load_dataset(self.root / "elsewhere")

    def test_store_labels(self):
        store = ArtifactStore(self.root)
        labels = {"x": DenseLabelVolume(np.ones((3, 8, 8)), LabelSource.SSL)}
        directory = store.save_labels(0, "registration", labels, suffix="sub")
        self.assertEqual(directory, self.root / "fold_0" / "registration" / "sub")
        loaded = store.load_labels(0, "registration", "sub")
        self.assertEqual(list(loaded), ["x"])
        self.assertEqual(loaded["x"].source, LabelSource.SSL)


class TestRunner(unittest.TestCase):
    """Stage plumbing and end-to-end runs on tiny phantoms."""

    def setUp(self):
        """Set up a temporary directory."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        """Clean up the temporary directory."""
        self.temp_dir.cleanup()

    def test_stage_seeds(self):
        seeds = {stage_seed(0, 0, stage) for stage in STAGES}
        self.assertEqual(len(seeds), len(STAGES))
        self.assertEqual(stage_seed(5, 1, "semi"), stage_seed(5, 1, "semi"))
        self.assertNotEqual(stage_seed(5, 1, "semi"), stage_seed(5, 2, "semi"))

    def test_run_stage_wraps_failures(self):
        with self.assertRaises(StageError) as ctx:
            with run_stage("fusion"):
                raise RuntimeError("boom")
        self.assertEqual(ctx.exception.stage, "fusion")
        self.assertIsInstance(ctx.exception.cause, RuntimeError)

    def test_method_names(self):
        self.assertEqual(method_name(ExperimentConfig()), "pipeline")
        union = ExperimentConfig(fusion_mode="union")
        self.assertEqual(method_name(union), "pipeline_union")
        self.assertEqual(method_name(ExperimentConfig(mode="fs")), "fs")
        self.assertEqual(method_name(ExperimentConfig(), slice_budget=3), "fs_lcs_k3")

    def test_phantom_cases_ignore_training_seed(self):
        first = load_cases(tiny_config(self.root, seed=1))
        second = load_cases(tiny_config(self.root, seed=2))
        self.assertEqual(sorted(first), sorted(second))
        np.testing.assert_array_equal(
            first["phantom_000"].volume.voxels, second["phantom_000"].volume.voxels
        )

    def test_baseline_run_writes_reports(self):
        cfg = tiny_config(self.root)
        report = run_pipeline(cfg, run_dir=self.root / "first")
        self.assertEqual(report.method, "fs_lcs")
        self.assertEqual(len(report.per_case), 1)
        for name in ("report.json", "per_case.csv", MANIFEST_NAME):
            self.assertTrue((self.root / "first" / name).exists(), name)
        manifest = json.loads((self.root / "first" / MANIFEST_NAME).read_text())
        self.assertEqual(manifest["config_hash"], config_hash(cfg))
        self.assertIn("target", manifest["stage_versions"])
        self.assertNotIn("semi", manifest["stage_versions"])
        frame = pd.read_csv(self.root / "first" / "per_case.csv")
        self.assertEqual(len(frame), 1)

        again = run_pipeline(cfg, run_dir=self.root / "second")
        self.assertEqual(report.values("dsc"), again.values("dsc"))

    def test_full_pipeline_persists_every_stage(self):
        cfg = tiny_config(self.root, mode="pipeline")
        report = run_pipeline(cfg, run_dir=self.root / "run")
        fold = self.root / "run" / "fold_0"
        self.assertTrue((fold / "semi" / "net.pt").exists())
        self.assertEqual(load_checkpoint(fold / "semi" / "net_k1.pt").epoch, 1)
        history = pd.read_csv(fold / "semi" / "history.csv")
        self.assertEqual(
            list(history.columns), ["epoch", "alpha", "labeled_loss", "unlabeled_loss"]
        )
        self.assertEqual(list(history["epoch"]), [0, 1, 2])
        self.assertTrue((fold / "registration" / "net.pt").exists())
        self.assertEqual(len(list((fold / "fusion" / "consistent").glob("*.msk"))), 4)
        self.assertEqual(len(list((fold / "fusion" / "inconsistent").glob("*.msk"))), 4)
        self.assertTrue((fold / "target" / "net.pt").exists())
        self.assertEqual(len(list((fold / "inference").glob("*.msk"))), 1)
        self.assertTrue((fold / "evaluation" / "report.json").exists())
        self.assertEqual(len(report.extras["pseudo_label_dsc"]), 4)
        self.assertIn("slice_dsc_by_distance", report.extras)

    def test_mode_checks(self):
        with self.assertRaises(ConfigError):
            run_pipeline(tiny_config(self.root, mode="alpha_sweep"))
        with self.assertRaises(ConfigError):
            run_sweep(tiny_config(self.root, mode="fs"))

    def test_alpha_sweep_names_each_point(self):
        cfg = tiny_config(
            self.root, mode="alpha_sweep", sweep={"alpha_values": [1.0, 3.0]}
        )
        sweep = run_sweep(cfg)
        sweep_dir = self.root / "alpha_sweep"
        frame = pd.read_csv(sweep_dir / "alpha_sweep.csv")
        self.assertEqual(list(frame["value"]), [1.0, 3.0])
        self.assertEqual(
            list(frame["method"]), ["semi_pl_only_alpha1", "semi_pl_only_alpha3"]
        )
        for alpha in ("1", "3"):
            point = sweep_dir / f"alpha_{alpha}"
            self.assertTrue((point / "fold_0" / "semi" / "net.pt").exists())
            self.assertFalse((point / "fold_0" / "registration").exists())
        comparisons = MetricsReport.load(sweep_dir / "comparisons.json").comparisons
        self.assertEqual(len(comparisons), len(sweep.comparisons))
        self.assertEqual(
            {(c["method_a"], c["method_b"]) for c in comparisons},
            {("semi_pl_only_alpha1", "semi_pl_only_alpha3")},
        )

    def test_fusion_mode_sweep_shares_pseudo_labels(self):
        cfg = tiny_config(
            self.root,
            mode="fusion_mode_sweep",
            sweep={"fusion_modes": ["consistency", "intersection", "union"]},
        )
        sweep = run_sweep(cfg)
        sweep_dir = self.root / "fusion_mode_sweep"
        frame = pd.read_csv(sweep_dir / "fusion_mode_sweep.csv")
        self.assertEqual(
            list(frame["method"]),
            ["pipeline", "pipeline_intersection", "pipeline_union"],
        )
        first = sweep_dir / "consistency" / "fold_0"
        self.assertTrue((first / "semi" / "net.pt").exists())
        self.assertTrue((first / "registration" / "net.pt").exists())
        for mode in ("intersection", "union"):
            fold = sweep_dir / mode / "fold_0"
            self.assertFalse((fold / "semi" / "net.pt").exists())
            self.assertFalse((fold / "registration" / "net.pt").exists())
            for stage in ("semi", "registration"):
                for path in (first / stage).glob("*.msk"):
                    np.testing.assert_array_equal(
                        load_mask(fold / stage / path.name).masks,
                        load_mask(path).masks,
                    )
        comparisons = MetricsReport.load(sweep_dir / "comparisons.json").comparisons
        self.assertEqual(len({(c["method_a"], c["method_b"]) for c in comparisons}), 3)
        self.assertEqual(len(comparisons), 3 * len(METRIC_NAMES))
        self.assertTrue(all(c["n"] == 1 for c in comparisons))

    def test_slice_budget_sweep(self):
        cfg = tiny_config(
            self.root, mode="slice_budget_sweep", sweep={"slice_budgets": [1, 2]}
        )
        sweep = run_sweep(cfg)
        self.assertEqual(sorted(sweep.reports), ["1", "2"])
        sweep_dir = self.root / "slice_budget_sweep"
        frame = pd.read_csv(sweep_dir / "slice_budget_sweep.csv")
        self.assertEqual(list(frame["value"]), [1, 2])
        self.assertEqual(list(frame["method"]), ["fs_lcs_k1", "fs_lcs_k2"])
        self.assertTrue((sweep_dir / "k_2" / "report.json").exists())
        self.assertTrue((sweep_dir / "summary.json").exists())

@unittest.skipUnless(
    os.environ.get("SLICECOLLAB_SLOW"), "set SLICECOLLAB_SLOW=1 for training runs"
)
class TestMethodOrdering(unittest.TestCase):
    """Mean test DSC of every method on one shared split of 64x64 phantoms."""

    @classmethod
    def setUpClass(cls):
        """Run the baselines and both fusion variants with shared pseudo labels."""
        cls.temp_dir = tempfile.TemporaryDirectory()
        root = Path(cls.temp_dir.name)
        cfg = ExperimentConfig.from_dict(
            {
                "seed": 0,
                "out_dir": str(root),
                "split": "fixed_80_20",
                "phantom": {"count": 30, "shape": [17, 64, 64]},
                "semi": {"epochs": 60, "batch_size": 8, "lr": 1e-3},
                "semi_loss": {"K1": 20, "K2": 40},
                "registration": {"epochs": 30},
                "target": {"epochs": 40, "batch_size": 8, "lr": 1e-3},
            }
        )
        cases = load_cases(cfg)
        cache = {}
        cls.dsc = {}
        runs = [
            ("fs_lcs", cfg.replace(mode="fs_lcs")),
            ("semi_pl_only", cfg.replace(mode="semi_pl_only")),
            ("self_pl_only", cfg.replace(mode="self_pl_only")),
            ("pipeline", cfg.replace(mode="pipeline")),
            ("union", cfg.replace(mode="pipeline", fusion_mode="union")),
        ]
        for name, run_cfg in runs:
            report = run_pipeline(
                run_cfg, run_dir=root / name, cache=cache, cases=cases
            )
            cls.dsc[name] = float(np.mean(list(report.values("dsc").values())))

    @classmethod
    def tearDownClass(cls):
        """Clean up the temporary directory."""
        cls.temp_dir.cleanup()

    def test_single_sources_beat_central_slice_baseline(self):
        self.assertLess(self.dsc["fs_lcs"], self.dsc["semi_pl_only"])
        self.assertLess(self.dsc["fs_lcs"], self.dsc["self_pl_only"])

    def test_fused_labels_beat_single_sources(self):
        self.assertLess(self.dsc["semi_pl_only"], self.dsc["pipeline"])
        self.assertLess(self.dsc["self_pl_only"], self.dsc["pipeline"])
        self.assertGreaterEqual(self.dsc["pipeline"], self.dsc["fs_lcs"] + 0.05)

    def test_consistency_beats_union(self):
        self.assertLess(self.dsc["union"], self.dsc["pipeline"])



if __name__ == "__main__":
    unittest.main()
