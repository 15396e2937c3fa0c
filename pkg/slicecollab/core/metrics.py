"""Segmentation metrics, per-case reports and paired significance tests."""

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd
from scipy import ndimage, special

from slicecollab.core.volume import DenseLabelVolume
from slicecollab.errors import MetricUndefinedError, ShapeMismatchError

logger = logging.getLogger(__name__)

METRIC_NAMES = ("b_iou", "dsc", "assd_mm", "ravd")

# Boundary band default as a fraction of the volume diagonal
BAND_FRACTION = 0.02

MaskLike = Union[np.ndarray, DenseLabelVolume]


def _as_mask(mask: MaskLike) -> np.ndarray:
    if isinstance(mask, DenseLabelVolume):
        mask = mask.masks
    return np.asarray(mask).astype(bool)


def _pair(pred: MaskLike, gt: MaskLike) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_mask(pred), _as_mask(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"prediction {pred.shape} and ground truth {gt.shape} differ"
        )
    return pred, gt


def default_band_px(shape: Sequence[int]) -> int:
    """``max(1, round(0.02 * diagonal))`` for a volume shape in voxels."""
    diagonal = math.sqrt(sum(s * s for s in shape))
    return max(1, int(round(BAND_FRACTION * diagonal)))


def boundary_extract(mask: MaskLike, band_px: int = 0) -> np.ndarray:
    """
    Surface voxels of a binary mask, optionally widened into a band.

    A surface voxel is a foreground voxel with at least one background
    6-neighbor; voxels outside the array count as background.

    Args:
        mask: Binary mask of any dimensionality
        band_px: Chebyshev radius of the band; 0 returns the raw surface

    Returns:
        Boolean boundary region
    """
    if band_px < 0:
        raise ValueError(f"band_px must be non-negative, got {band_px}")
    mask = _as_mask(mask)
    if not mask.any():
        return np.zeros_like(mask)
    footprint = ndimage.generate_binary_structure(mask.ndim, 1)
    surface = mask & ~ndimage.binary_erosion(mask, structure=footprint, border_value=0)
    if band_px == 0:
        return surface
    cube = np.ones((3,) * mask.ndim, dtype=bool)
    return ndimage.binary_dilation(surface, structure=cube, iterations=band_px)


def b_iou(pred: MaskLike, gt: MaskLike, band_px: Optional[int] = None) -> float:
    """Boundary IoU of the two boundary bands; 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    if not pred.any() and not gt.any():
        return 1.0
    if band_px is None:
        band_px = default_band_px(pred.shape)
    pred_band = boundary_extract(pred, band_px)
    gt_band = boundary_extract(gt, band_px)
    union = np.count_nonzero(pred_band | gt_band)
    return np.count_nonzero(pred_band & gt_band) / union


def confusion_counts(pred: MaskLike, gt: MaskLike) -> Tuple[int, int, int]:
    """(TP, FP, FN) voxel counts."""
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dsc(pred: MaskLike, gt: MaskLike) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when both masks are empty."""
    tp, fp, fn = confusion_counts(pred, gt)
    denominator = 2 * tp + fp + fn
    if denominator == 0:
        return 1.0
    return 2 * tp / denominator


def assd(
    pred: MaskLike, gt: MaskLike, spacing_mm: Sequence[float] = (1.0, 1.0, 1.0)
) -> float:
    """
    Average symmetric surface distance in millimeters.

    Args:
        pred: Predicted mask
        gt: Ground-truth mask
        spacing_mm: Voxel size along each array axis

    Raises:
        MetricUndefinedError: If either mask is empty
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        raise MetricUndefinedError("ASSD is undefined for an empty mask")
    sampling = np.asarray(spacing_mm, dtype=np.float64)
    if sampling.shape != (pred.ndim,):
        raise ShapeMismatchError(
            f"spacing {tuple(sampling)} does not match {pred.ndim} axes"
        )
    pred_surface = boundary_extract(pred)
    gt_surface = boundary_extract(gt)
    to_gt = ndimage.distance_transform_edt(~gt_surface, sampling=sampling)
    to_pred = ndimage.distance_transform_edt(~pred_surface, sampling=sampling)
    to_gt, to_pred = to_gt[pred_surface], to_pred[gt_surface]
    return float((to_gt.sum() + to_pred.sum()) / (to_gt.size + to_pred.size))


def ravd(pred: MaskLike, gt: MaskLike) -> float:
    """
    Relative absolute volume difference ``|(FP - FN) / (TP + FN)|``.

    Raises:
        MetricUndefinedError: If the ground truth is empty
    """
    tp, fp, fn = confusion_counts(pred, gt)
    if tp + fn == 0:
        raise MetricUndefinedError("RAVD is undefined for an empty ground truth")
    return abs((fp - fn) / (tp + fn))


class TTestResult(NamedTuple):
    t: float
    p: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.p)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """
    Two-tailed paired t-test.

    The tail probability uses the regularized incomplete beta function:
    ``p = I_{df/(df+t^2)}(df/2, 1/2)`` with ``df = n - 1``.

    Returns:
        ``(t, p)``; both NaN when all differences are identical

    Raises:
        ValueError: If the samples differ in length or have fewer than 2 pairs
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(
            f"paired samples must be equal-length 1D, got {a.shape} and {b.shape}"
        )
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        logger.debug("paired t-test undefined: zero variance of differences")
        return TTestResult(math.nan, math.nan)
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    p = special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(float(t), float(min(1.0, p)))


class SliceDscProfile(NamedTuple):
    per_slice: List[float]
    by_distance: Dict[int, float]


def slice_dsc_profile(
    pred: MaskLike, gt: MaskLike, central_index: int
) -> SliceDscProfile:
    """Per-slice DSC and its mean by distance from the central slice."""
    pred, gt = _pair(pred, gt)
    per_slice = [dsc(p, g) for p, g in zip(pred, gt)]
    by_distance: Dict[int, List[float]] = {}
    for index, value in enumerate(per_slice):
        by_distance.setdefault(abs(index - central_index), []).append(value)
    return SliceDscProfile(
        per_slice, {d: float(np.mean(v)) for d, v in sorted(by_distance.items())}
    )


def pseudo_label_quality(labels: DenseLabelVolume, gt: MaskLike) -> Optional[float]:
    """DSC of pseudo labels against ground truth on the slices they cover."""
    gt = _as_mask(gt)
    if labels.shape != gt.shape:
        raise ShapeMismatchError("pseudo labels and ground truth differ in shape")
    covered = labels.covered
    if not covered.any():
        return None
    return dsc(labels.masks[covered], gt[covered])


@dataclass
class CaseMetrics:
    """Metrics of one case; undefined values are None and named in ``flags``."""

    case_id: str
    b_iou: float
    dsc: float
    assd_mm: Optional[float] = None
    ravd: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    def value(self, metric: str) -> Optional[float]:
        return getattr(self, metric)


def evaluate_case(
    case_id: str,
    pred: MaskLike,
    gt: MaskLike,
    spacing_mm: Sequence[float] = (1.0, 1.0, 1.0),
    band_px: Optional[int] = None,
) -> CaseMetrics:
    """Compute every metric for one case, flagging the undefined ones."""
    pred, gt = _pair(pred, gt)
    metrics = CaseMetrics(
        case_id=case_id, b_iou=b_iou(pred, gt, band_px), dsc=dsc(pred, gt)
    )
    undefined_prone = {
        "assd_mm": lambda: assd(pred, gt, spacing_mm),
        "ravd": lambda: ravd(pred, gt),
    }
    for name, compute in undefined_prone.items():
        try:
            setattr(metrics, name, compute())
        except MetricUndefinedError as e:
            logger.warning(f"{case_id}: {e}")
            metrics.flags.append(f"{name}_undefined")
    return metrics


@dataclass
class MetricsReport:
    """Per-case metrics of one method plus optional pairwise comparisons."""

    method: str
    per_case: List[CaseMetrics] = field(default_factory=list)
    comparisons: List[Dict[str, Any]] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)

    def values(self, metric: str) -> Dict[str, float]:
        """Defined values of ``metric`` keyed by case id."""
        return {
            c.case_id: c.value(metric)
            for c in self.per_case
            if c.value(metric) is not None
        }

    @property
    def summary(self) -> Dict[str, Dict[str, Any]]:
        summary = {}
        for metric in METRIC_NAMES:
            values = np.array(list(self.values(metric).values()), dtype=np.float64)
            sd = None
            if values.size:
                sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
            summary[metric] = {
                "mean": float(values.mean()) if values.size else None,
                "sd": sd,
                "n": int(values.size),
                "undefined": len(self.per_case) - int(values.size),
            }
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "per_case": [asdict(c) for c in self.per_case],
            "summary": self.summary,
            "comparisons": self.comparisons,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        return cls(
            method=data["method"],
            per_case=[CaseMetrics(**c) for c in data.get("per_case", [])],
            comparisons=list(data.get("comparisons", [])),
            extras=dict(data.get("extras", {})),
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_json_safe(self.to_dict()), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {**asdict(c), "flags": ";".join(c.flags), "method": self.method}
            for c in self.per_case
        ]
        columns = ["method", "case_id", *METRIC_NAMES, "flags"]
        return pd.DataFrame(rows, columns=columns)

    def write_csv(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)


def _json_safe(value: Any) -> Any:
    """Replace NaN with None so reports stay valid JSON."""
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def evaluate_cases(
    method: str,
    predictions: Mapping[str, MaskLike],
    ground_truth: Mapping[str, MaskLike],
    spacings: Optional[Mapping[str, Sequence[float]]] = None,
    band_px: Optional[int] = None,
) -> MetricsReport:
    """
    Evaluate a method on every case, in sorted case order.

    Raises:
        ValueError: If the prediction and ground-truth case sets differ
    """
    if set(predictions) != set(ground_truth):
        missing = sorted(set(ground_truth) ^ set(predictions))
        raise ValueError(f"prediction and ground-truth cases differ: {missing}")
    spacings = spacings or {}
    report = MetricsReport(method=method)
    for case_id in sorted(predictions):
        report.per_case.append(
            evaluate_case(
                case_id,
                predictions[case_id],
                ground_truth[case_id],
                spacings.get(case_id, (1.0, 1.0, 1.0)),
                band_px,
            )
        )
    return report


def compare_reports(
    reports: Sequence[MetricsReport], metrics: Sequence[str] = METRIC_NAMES
) -> List[Dict[str, Any]]:
    """
    Paired t-tests between every pair of methods on case-matched values.

    Returns:
        One record per (method_a, method_b, metric) with t, p, the number of
        matched cases and whether the test was defined
    """
    comparisons = []
    for first, second in itertools.combinations(reports, 2):
        for metric in metrics:
            a_values, b_values = first.values(metric), second.values(metric)
            common = sorted(set(a_values) & set(b_values))
            result = TTestResult(math.nan, math.nan)
            if len(common) >= 2:
                result = paired_t_test(
                    [a_values[c] for c in common], [b_values[c] for c in common]
                )
            comparisons.append(
                {
                    "method_a": first.method,
                    "method_b": second.method,
                    "metric": metric,
                    "t": result.t,
                    "p_value": result.p,
                    "n": len(common),
                    "defined": result.defined,
                }
            )
    return comparisons
