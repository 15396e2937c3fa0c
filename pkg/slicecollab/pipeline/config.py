"""Experiment configuration: modes, splits and the nested stage settings."""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from slicecollab.core.fusion import FusionMode
from slicecollab.core.losses import SemiLossConfig, TargetLossConfig
from slicecollab.core.nets import SegNetConfig
from slicecollab.core.phantom import PhantomConfig
from slicecollab.core.registration import (
    RegistrationConfig,
    default_registration_optimizer,
)
from slicecollab.core.target import default_target_optimizer
from slicecollab.core.training import OptimizerSettings
from slicecollab.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_VALUES = [0.1, 0.5, 1.0, 3.0, 5.0, 7.0, 9.0]
DEFAULT_SLICE_BUDGETS = [2, 3, 5, 6, 7]


class ExperimentMode(str, Enum):
    PIPELINE = "pipeline"
    FS_LCS = "fs_lcs"
    FS = "fs"
    SEMI_PL_ONLY = "semi_pl_only"
    SELF_PL_ONLY = "self_pl_only"
    ALPHA_SWEEP = "alpha_sweep"
    SLICE_BUDGET_SWEEP = "slice_budget_sweep"
    FUSION_MODE_SWEEP = "fusion_mode_sweep"

    @property
    def is_sweep(self) -> bool:
        return self.value.endswith("_sweep")


class SplitStrategy(str, Enum):
    FIVE_FOLD = "five_fold"
    FIXED_80_20 = "fixed_80_20"


def _default_semi_optimizer() -> OptimizerSettings:
    # Ramp saturates at K2 = 100; train on for 20 more epochs
    return OptimizerSettings(lr=1e-4, batch_size=4, epochs=120)


@dataclass
class SweepConfig:
    """Values visited by the three sweep modes."""

    alpha_values: List[float] = field(
        default_factory=lambda: list(DEFAULT_ALPHA_VALUES)
    )
    slice_budgets: List[int] = field(
        default_factory=lambda: list(DEFAULT_SLICE_BUDGETS)
    )
    fusion_modes: List[str] = field(
        default_factory=lambda: [mode.value for mode in FusionMode]
    )

    def __post_init__(self):
        self.alpha_values = [float(a) for a in self.alpha_values]
        self.slice_budgets = [int(k) for k in self.slice_budgets]
        try:
            self.fusion_modes = [FusionMode(m).value for m in self.fusion_modes]
        except ValueError as e:
            raise ConfigError(f"Invalid fusion mode in sweep: {e}") from e
        if any(a <= 0 for a in self.alpha_values):
            raise ConfigError("alpha sweep values must be positive")
        if any(k < 1 for k in self.slice_budgets):
            raise ConfigError("slice budgets must be at least 1")


@dataclass
class EvaluationConfig:
    # None selects the default band from the volume diagonal
    band_px: Optional[int] = None
    spacing_from_sidecar: bool = True

    def __post_init__(self):
        if self.band_px is not None and self.band_px < 0:
            raise ConfigError("band_px must be non-negative")


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"Config section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid section '{name}': {e}") from e


# Optimizer sections start from their stage defaults, not the plain dataclass
_OPTIMIZER_DEFAULTS = {
    "semi": _default_semi_optimizer,
    "registration": default_registration_optimizer,
    "target": default_target_optimizer,
}


def _optimizer_section(data: Any, name: str) -> OptimizerSettings:
    defaults = _OPTIMIZER_DEFAULTS[name]().to_dict()
    if data is None:
        return OptimizerSettings(**defaults)
    if not isinstance(data, dict):
        raise ConfigError(f"Config section '{name}' must be an object")
    unknown = set(data) - set(defaults)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {sorted(unknown)}")
    return OptimizerSettings(**{**defaults, **data})


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment run."""

    seed: int = 0
    # None generates phantom data from the ``phantom`` section
    data_dir: Optional[str] = None
    out_dir: str = "runs"
    mode: ExperimentMode = ExperimentMode.PIPELINE
    split: SplitStrategy = SplitStrategy.FIVE_FOLD
    fusion_mode: FusionMode = FusionMode.CONSISTENCY
    # Run only the first N folds (None runs all of them)
    max_folds: Optional[int] = None
    semi: OptimizerSettings = field(default_factory=_default_semi_optimizer)
    registration: OptimizerSettings = field(
        default_factory=default_registration_optimizer
    )
    target: OptimizerSettings = field(default_factory=default_target_optimizer)
    semi_loss: SemiLossConfig = field(default_factory=SemiLossConfig)
    target_loss: TargetLossConfig = field(default_factory=TargetLossConfig)
    registration_loss: RegistrationConfig = field(default_factory=RegistrationConfig)
    network: SegNetConfig = field(default_factory=SegNetConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        try:
            self.mode = ExperimentMode(self.mode)
            self.split = SplitStrategy(self.split)
            self.fusion_mode = FusionMode(self.fusion_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.max_folds is not None and self.max_folds < 1:
            raise ConfigError("max_folds must be at least 1")

    def validate(self) -> None:
        """Check the fields the selected mode depends on."""
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.data_dir} is not a directory")
        sweep_values = {
            ExperimentMode.ALPHA_SWEEP: self.sweep.alpha_values,
            ExperimentMode.SLICE_BUDGET_SWEEP: self.sweep.slice_budgets,
            ExperimentMode.FUSION_MODE_SWEEP: self.sweep.fusion_modes,
        }
        if self.mode in sweep_values and not sweep_values[self.mode]:
            raise ConfigError(f"mode {self.mode.value} needs at least one sweep value")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """
        Build a config from parsed JSON.

        Raises:
            ConfigError: On unknown keys or invalid values
        """
        if not isinstance(data, dict):
            raise ConfigError("Experiment config must be a JSON object")
        sections = {
            "semi_loss": SemiLossConfig,
            "target_loss": TargetLossConfig,
            "registration_loss": RegistrationConfig,
            "network": SegNetConfig,
            "phantom": PhantomConfig,
            "sweep": SweepConfig,
            "evaluation": EvaluationConfig,
        }
        scalars = {
            "seed",
            "data_dir",
            "out_dir",
            "mode",
            "split",
            "fusion_mode",
            "max_folds",
        }
        unknown = set(data) - scalars - set(sections) - set(_OPTIMIZER_DEFAULTS)
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")

        kwargs: Dict[str, Any] = {k: data[k] for k in scalars if k in data}
        for name, section_cls in sections.items():
            kwargs[name] = _section(section_cls, data.get(name), name)
        for name in _OPTIMIZER_DEFAULTS:
            kwargs[name] = _optimizer_section(data.get(name), name)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        for key in ("mode", "split", "fusion_mode"):
            data[key] = getattr(self, key).value
        return data

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read an :class:`ExperimentConfig` from a JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    logger.debug(f"Loaded config from {path}")
    return ExperimentConfig.from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical sorted-key JSON of the config."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
