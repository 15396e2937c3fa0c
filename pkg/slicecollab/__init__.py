"""slicecollab - Annotation-efficient volumetric segmentation from one labeled slice."""

from importlib.metadata import version

try:
    __version__ = version("slicecollab")
except Exception:
    __version__ = "unknown"

# Public API
from slicecollab.core.fusion import FusedLabels, fuse, fuse_mode
from slicecollab.core.metrics import MetricsReport, evaluate_cases, paired_t_test
from slicecollab.core.registration import propagate_labels, train_registration
from slicecollab.core.semi import generate_pseudo_labels, train_semi
from slicecollab.core.target import infer_volume, train_target
from slicecollab.pipeline.runner import run_pipeline, run_sweep

__all__ = [
    "FusedLabels",
    "MetricsReport",
    "evaluate_cases",
    "fuse",
    "fuse_mode",
    "generate_pseudo_labels",
    "infer_volume",
    "paired_t_test",
    "propagate_labels",
    "run_pipeline",
    "run_sweep",
    "train_registration",
    "train_semi",
    "train_target",
]
