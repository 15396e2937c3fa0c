"""End-to-end experiment runner: stages, baselines, sweeps and reports."""

import contextlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from slicecollab.core.fusion import FusionMode, fuse_mode
from slicecollab.core.metrics import (
    METRIC_NAMES,
    MetricsReport,
    compare_reports,
    evaluate_cases,
    pseudo_label_quality,
    slice_dsc_profile,
)
from slicecollab.core.nets import Checkpoint
from slicecollab.core.phantom import generate_phantom_dataset
from slicecollab.core.registration import propagate_labels, train_registration
from slicecollab.core.semi import train_semi
from slicecollab.core.target import (
    TargetCase,
    annotated_slices_case,
    full_volume_case,
    infer_volume,
    pseudo_label_case,
    target_case_from_fused,
    train_target,
)
from slicecollab.core.volume import (
    DenseLabelVolume,
    SparseAnnotatedVolume,
    Volume,
    central_slice_index,
    normalize,
)
from slicecollab.errors import ConfigError, StageError
from slicecollab.pipeline.artifacts import (
    ArtifactStore,
    load_dataset,
    write_csv,
    write_json,
    write_manifest,
)
from slicecollab.pipeline.config import ExperimentConfig, ExperimentMode
from slicecollab.pipeline.splits import Fold, annotated_slice_indices, split_dataset

logger = logging.getLogger(__name__)

STAGES = ("semi", "registration", "fusion", "target", "inference", "evaluation")
_STAGE_IDS = {name: index for index, name in enumerate(STAGES)}

ProgressCallback = Callable[[str, Dict[str, float]], None]


def stage_seed(seed: int, fold: int, stage: str) -> int:
    """Deterministic seed of one stage of one fold."""
    state = np.random.SeedSequence([seed, fold, _STAGE_IDS[stage]]).generate_state(1)
    return int(state[0])


@contextlib.contextmanager
def run_stage(name: str):
    """Wrap a stage so any failure surfaces as a :class:`StageError`."""
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.debug(f"Stage '{name}' failed", exc_info=True)
        raise StageError(name, e) from e
    logger.info(f"Stage '{name}' finished")


def stages_for_mode(mode: ExperimentMode) -> List[str]:
    stages = []
    if mode in (ExperimentMode.PIPELINE, ExperimentMode.SEMI_PL_ONLY):
        stages.append("semi")
    if mode in (ExperimentMode.PIPELINE, ExperimentMode.SELF_PL_ONLY):
        stages.append("registration")
    if mode is ExperimentMode.PIPELINE:
        stages.append("fusion")
    return stages + ["target", "inference", "evaluation"]


@dataclass
class CaseData:
    """A normalized volume and its dense ground truth."""

    volume: Volume
    labels: DenseLabelVolume

    @property
    def sparse(self) -> SparseAnnotatedVolume:
        return SparseAnnotatedVolume.from_dense(self.volume, self.labels)


@dataclass
class PseudoLabels:
    semi: Dict[str, DenseLabelVolume] = field(default_factory=dict)
    ssl: Dict[str, DenseLabelVolume] = field(default_factory=dict)


def load_cases(cfg: ExperimentConfig) -> Dict[str, CaseData]:
    """
    Read the dataset (or generate phantoms) and z-score every volume.

    Phantom data is fixed by ``cfg.phantom.seed`` so runs with different
    training seeds see the same cases.
    """
    if cfg.data_dir is not None:
        raw = load_dataset(cfg.data_dir)
    else:
        raw = generate_phantom_dataset(
            cfg.phantom.count, cfg.phantom.shape, cfg.phantom.seed, cfg.phantom
        )
    return {
        volume.case_id: CaseData(normalize(volume), labels) for volume, labels in raw
    }


def method_name(cfg: ExperimentConfig, slice_budget: Optional[int] = None) -> str:
    if slice_budget is not None:
        return f"fs_lcs_k{slice_budget}"
    fusion = cfg.fusion_mode
    if cfg.mode is ExperimentMode.PIPELINE and fusion is not FusionMode.CONSISTENCY:
        return f"pipeline_{cfg.fusion_mode.value}"
    return cfg.mode.value


class FoldRunner:
    """Runs the stages of one mode on one fold, persisting every artifact."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        fold: Fold,
        cases: Dict[str, CaseData],
        store: ArtifactStore,
        progress: Optional[ProgressCallback] = None,
    ):
        self.cfg = cfg
        self.fold = fold
        self.cases = cases
        self.store = store
        self.progress = progress
        self.train_items = [cases[c].sparse for c in fold.train]
        self.spacings = {c: data.volume.spacing_mm for c, data in cases.items()}

    def _seed(self, stage: str) -> int:
        return stage_seed(self.cfg.seed, self.fold.index, stage)

    def _callback(self, stage: str):
        if self.progress is None:
            return None
        label = f"fold {self.fold.index} {stage}"
        return lambda record: self.progress(label, record)

    def _save_checkpoint(
        self, stage: str, checkpoint: Checkpoint, name: str = "net"
    ) -> None:
        self.store.save_checkpoint(self.fold.index, stage, checkpoint, name)

    def semi_labels(self) -> Dict[str, DenseLabelVolume]:
        cfg = self.cfg
        with run_stage("semi"):
            seed = self._seed("semi")
            state = train_semi(
                self.train_items,
                cfg.semi_loss,
                cfg.semi,
                total_epochs=cfg.semi.epochs,
                net_config=cfg.network,
                seed=seed,
                callback=self._callback("semi"),
            )
            self._save_checkpoint("semi", state.checkpoint())
            self._save_checkpoint("semi", state.k1_checkpoint(), "net_k1")
            write_csv(
                state.history,
                self.store.stage_dir(self.fold.index, "semi") / "history.csv",
            )
            self.store.save_labels(
                self.fold.index, "semi", state.pseudo_labels, self.spacings
            )
        return state.pseudo_labels

    def ssl_labels(self) -> Dict[str, DenseLabelVolume]:
        cfg = self.cfg
        with run_stage("registration"):
            checkpoint = train_registration(
                [item.volume for item in self.train_items],
                cfg.registration,
                net_config=cfg.network,
                cfg=cfg.registration_loss,
                seed=self._seed("registration"),
                callback=self._callback("registration"),
            )
            self._save_checkpoint("registration", checkpoint)
            labels = {
                item.case_id: propagate_labels(
                    checkpoint.net, item, cfg.registration_loss, cfg.registration.device
                )
                for item in self.train_items
            }
            self.store.save_labels(
                self.fold.index, "registration", labels, self.spacings
            )
        return labels

    def pseudo_labels(self, cache: Optional[Dict[int, PseudoLabels]]) -> PseudoLabels:
        """Generate the pseudo labels the mode needs, reusing a shared cache."""
        mode = self.cfg.mode
        cached = (cache or {}).get(self.fold.index, PseudoLabels())
        labels = PseudoLabels(dict(cached.semi), dict(cached.ssl))
        if mode in (ExperimentMode.PIPELINE, ExperimentMode.SEMI_PL_ONLY):
            if labels.semi:
                self.store.save_labels(
                    self.fold.index, "semi", labels.semi, self.spacings
                )
            else:
                labels.semi = self.semi_labels()
        if mode in (ExperimentMode.PIPELINE, ExperimentMode.SELF_PL_ONLY):
            if labels.ssl:
                self.store.save_labels(
                    self.fold.index, "registration", labels.ssl, self.spacings
                )
            else:
                labels.ssl = self.ssl_labels()
        if cache is not None:
            cache[self.fold.index] = labels
        return labels

    def target_cases(
        self, labels: PseudoLabels, slice_budget: Optional[int], extras: Dict[str, Any]
    ) -> List[TargetCase]:
        mode = self.cfg.mode
        items = self.train_items
        if slice_budget is not None or mode is ExperimentMode.FS_LCS:
            k = slice_budget or 1
            return [
                annotated_slices_case(
                    self.cases[c].volume,
                    self.cases[c].labels,
                    annotated_slice_indices(self.cases[c].volume.num_slices, k),
                )
                for c in self.fold.train
            ]
        if mode is ExperimentMode.FS:
            return [
                full_volume_case(self.cases[c].volume, self.cases[c].labels)
                for c in self.fold.train
            ]
        if mode is ExperimentMode.SEMI_PL_ONLY:
            return [pseudo_label_case(i, labels.semi[i.case_id]) for i in items]
        if mode is ExperimentMode.SELF_PL_ONLY:
            return [pseudo_label_case(i, labels.ssl[i.case_id]) for i in items]

        fusion = self.cfg.fusion_mode
        with run_stage("fusion"):
            fused = {
                i.case_id: fuse_mode(
                    labels.semi[i.case_id], labels.ssl[i.case_id], fusion
                )
                for i in items
            }
            self.store.save_labels(
                self.fold.index,
                "fusion",
                {c: f.consistent for c, f in fused.items()},
                self.spacings,
                "consistent",
            )
            self.store.save_labels(
                self.fold.index,
                "fusion",
                {c: f.inconsistent for c, f in fused.items()},
                self.spacings,
                "inconsistent",
            )
        quality = extras.setdefault("pseudo_label_dsc", {})
        for item in self.train_items:
            gt = self.cases[item.case_id].labels
            quality[item.case_id] = {
                "semi": pseudo_label_quality(labels.semi[item.case_id], gt),
                "ssl": pseudo_label_quality(labels.ssl[item.case_id], gt),
                "consistent": pseudo_label_quality(fused[item.case_id].consistent, gt),
            }
        use_uncertain = fusion is FusionMode.CONSISTENCY
        return [
            target_case_from_fused(i, fused[i.case_id], use_uncertain)
            for i in self.train_items
        ]

    def run(
        self,
        cache: Optional[Dict[int, PseudoLabels]] = None,
        slice_budget: Optional[int] = None,
        method: Optional[str] = None,
    ) -> MetricsReport:
        cfg = self.cfg
        method = method or method_name(cfg, slice_budget)
        extras: Dict[str, Any] = {}
        labels = PseudoLabels()
        if slice_budget is None:
            labels = self.pseudo_labels(cache)
        target_cases = self.target_cases(labels, slice_budget, extras)

        with run_stage("target"):
            checkpoint = train_target(
                target_cases,
                cfg.target_loss,
                cfg.target,
                net_config=cfg.network,
                seed=self._seed("target"),
                callback=self._callback("target"),
            )
            self._save_checkpoint("target", checkpoint)

        with run_stage("inference"):
            predictions = {
                c: infer_volume(checkpoint.net, self.cases[c].volume, cfg.target.device)
                for c in self.fold.test
            }
            self.store.save_labels(
                self.fold.index, "inference", predictions, self.spacings
            )

        with run_stage("evaluation"):
            spacings = None
            if cfg.evaluation.spacing_from_sidecar:
                spacings = {c: self.spacings[c] for c in self.fold.test}
            report = evaluate_cases(
                method,
                predictions,
                {c: self.cases[c].labels for c in self.fold.test},
                spacings,
                cfg.evaluation.band_px,
            )
            profiles = extras.setdefault("slice_dsc_by_distance", {})
            for c in self.fold.test:
                profile = slice_dsc_profile(
                    predictions[c],
                    self.cases[c].labels,
                    central_slice_index(self.cases[c].volume),
                )
                profiles[c] = {str(d): v for d, v in profile.by_distance.items()}
            report.extras = extras
            evaluation_dir = self.store.stage_dir(self.fold.index, "evaluation")
            report.save(evaluation_dir / "report.json")
        return report


def _merge_reports(method: str, reports: Sequence[MetricsReport]) -> MetricsReport:
    merged = MetricsReport(method=method)
    for report in reports:
        merged.per_case.extend(report.per_case)
        for key, values in report.extras.items():
            merged.extras.setdefault(key, {}).update(values)
    merged.per_case.sort(key=lambda c: c.case_id)
    return merged


def run_pipeline(
    cfg: ExperimentConfig,
    progress: Optional[ProgressCallback] = None,
    run_dir: Optional[Path] = None,
    cache: Optional[Dict[int, PseudoLabels]] = None,
    slice_budget: Optional[int] = None,
    cases: Optional[Dict[str, CaseData]] = None,
    method: Optional[str] = None,
) -> MetricsReport:
    """
    Run one non-sweep mode over every fold and write its report.

    Args:
        cfg: Experiment configuration
        progress: Called with ``(stage label, epoch record)`` during training
        run_dir: Output directory; defaults to ``<out_dir>/<method>``
        cache: Pseudo labels per fold shared between runs of one sweep
        slice_budget: Train on this many annotated slices per volume
        cases: Preloaded cases (loaded from ``cfg`` when omitted)
        method: Report name; derived from the mode when omitted

    Returns:
        The report over all test cases of all folds

    Raises:
        StageError: When a stage fails; completed artifacts stay on disk
        ConfigError: For sweep modes or invalid configuration
    """
    if cfg.mode.is_sweep:
        raise ConfigError(f"mode {cfg.mode.value} is a sweep; use run_sweep")
    cfg.validate()
    method = method or method_name(cfg, slice_budget)
    run_dir = Path(run_dir) if run_dir is not None else Path(cfg.out_dir) / method
    store = ArtifactStore(run_dir)

    with run_stage("data"):
        cases = cases if cases is not None else load_cases(cfg)
        folds = split_dataset(sorted(cases), cfg.split, cfg.seed)
    if cfg.max_folds is not None:
        folds = folds[: cfg.max_folds]
    logger.info(f"Running {method} on {len(cases)} cases, {len(folds)} fold(s)")

    reports = []
    for fold in folds:
        logger.info(
            f"Fold {fold.index}: {len(fold.train)} train / {len(fold.test)} test"
        )
        runner = FoldRunner(cfg, fold, cases, store, progress)
        reports.append(runner.run(cache, slice_budget, method))

    report = _merge_reports(method, reports)
    report.save(run_dir / "report.json")
    report.write_csv(run_dir / "per_case.csv")
    write_manifest(
        run_dir,
        cfg,
        stages_for_mode(cfg.mode),
        {
            "method": method,
            "folds": [f._asdict() for f in folds],
            "slice_budget": slice_budget,
        },
    )
    return report


@dataclass
class SweepReport:
    """Reports of every sweep point, the plot-ready rows and pairwise t-tests."""

    mode: str
    reports: Dict[str, MetricsReport] = field(default_factory=dict)
    rows: List[Dict[str, Any]] = field(default_factory=list)
    comparisons: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, value: Any, report: MetricsReport) -> None:
        self.reports[str(value)] = report
        row: Dict[str, Any] = {
            "sweep": self.mode,
            "value": value,
            "method": report.method,
        }
        for metric in METRIC_NAMES:
            stats = report.summary[metric]
            row[f"{metric}_mean"] = stats["mean"]
            row[f"{metric}_sd"] = stats["sd"]
        row["n_cases"] = len(report.per_case)
        self.rows.append(row)


def run_sweep(
    cfg: ExperimentConfig, progress: Optional[ProgressCallback] = None
) -> SweepReport:
    """
    Run a sweep mode and write one CSV row per sweep value.

    ``alpha_sweep`` runs the self-training-only baseline per ramp ceiling,
    ``slice_budget_sweep`` the central-slice baseline with k annotated slices,
    and ``fusion_mode_sweep`` the full pipeline per fusion mode, training the
    pseudo-label stages once per fold.
    """
    if not cfg.mode.is_sweep:
        raise ConfigError(f"mode {cfg.mode.value} is not a sweep mode")
    cfg.validate()
    sweep_dir = Path(cfg.out_dir) / cfg.mode.value
    sweep = SweepReport(cfg.mode.value)
    with run_stage("data"):
        cases = load_cases(cfg)

    if cfg.mode is ExperimentMode.ALPHA_SWEEP:
        for alpha in cfg.sweep.alpha_values:
            point = cfg.replace(
                mode=ExperimentMode.SEMI_PL_ONLY,
                semi_loss=replace(cfg.semi_loss, alpha_f=alpha),
            )
            logger.info(f"alpha sweep: alpha_f={alpha}")
            report = run_pipeline(
                point,
                progress,
                sweep_dir / f"alpha_{alpha:g}",
                cases=cases,
                method=f"semi_pl_only_alpha{alpha:g}",
            )
            sweep.add(alpha, report)
    elif cfg.mode is ExperimentMode.SLICE_BUDGET_SWEEP:
        point = cfg.replace(mode=ExperimentMode.FS_LCS)
        for k in cfg.sweep.slice_budgets:
            logger.info(f"slice budget sweep: k={k}")
            report = run_pipeline(
                point, progress, sweep_dir / f"k_{k}", slice_budget=k, cases=cases
            )
            sweep.add(k, report)
    else:
        cache: Dict[int, PseudoLabels] = {}
        for mode in cfg.sweep.fusion_modes:
            point = cfg.replace(mode=ExperimentMode.PIPELINE, fusion_mode=mode)
            logger.info(f"fusion mode sweep: {mode}")
            report = run_pipeline(
                point, progress, sweep_dir / mode, cache=cache, cases=cases
            )
            sweep.add(mode, report)

    sweep.comparisons = compare_reports(list(sweep.reports.values()))
    MetricsReport(method=cfg.mode.value, comparisons=sweep.comparisons).save(
        sweep_dir / "comparisons.json"
    )
    write_csv(sweep.rows, sweep_dir / f"{cfg.mode.value}.csv")
    write_json(
        {value: r.summary for value, r in sweep.reports.items()},
        sweep_dir / "summary.json",
    )
    write_manifest(sweep_dir, cfg, ["target", "inference", "evaluation"])
    return sweep
