"""Consistency-based fusion of the two pseudo-label sets."""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from slicecollab.core.volume import DenseLabelVolume, LabelSource
from slicecollab.errors import ShapeMismatchError

logger = logging.getLogger(__name__)


class FusionMode(str, Enum):
    INTERSECTION = "intersection"
    UNION = "union"
    CONSISTENCY = "consistency"


@dataclass(frozen=True, eq=False)
class FusedLabels:
    """Certain (agreeing) and uncertain (disagreeing) pseudo labels.

    The two masks are pixelwise disjoint and together cover the union of the
    fused inputs.
    """

    consistent: DenseLabelVolume
    inconsistent: DenseLabelVolume

    def __post_init__(self):
        if self.consistent.shape != self.inconsistent.shape:
            raise ShapeMismatchError("consistent and inconsistent shapes differ")
        if np.logical_and(self.consistent.masks, self.inconsistent.masks).any():
            raise ValueError("consistent and inconsistent labels overlap")

    @property
    def shape(self):
        return self.consistent.shape


def _check_pair(y_semi: DenseLabelVolume, y_ssl: DenseLabelVolume) -> np.ndarray:
    if y_semi.shape != y_ssl.shape:
        raise ShapeMismatchError(
            f"pseudo label shapes differ: {y_semi.shape} vs {y_ssl.shape}"
        )
    return np.logical_and(y_semi.covered, y_ssl.covered)


def _fused(certain: np.ndarray, uncertain: np.ndarray, covered: np.ndarray):
    return FusedLabels(
        consistent=DenseLabelVolume(
            certain.astype(np.uint8), LabelSource.FUSED_CERTAIN, covered
        ),
        inconsistent=DenseLabelVolume(
            uncertain.astype(np.uint8), LabelSource.FUSED_UNCERTAIN, covered
        ),
    )


def fuse(y_semi: DenseLabelVolume, y_ssl: DenseLabelVolume) -> FusedLabels:
    """
    Split two pseudo-label sets into consistent and inconsistent pixels.

    Only slices covered by both inputs are fused; the rest (the central
    slice, which keeps its manual label) stay empty and uncovered.

    Args:
        y_semi: Self-training pseudo labels
        y_ssl: Registration-propagated pseudo labels

    Returns:
        ``consistent = semi AND ssl`` and
        ``inconsistent = (semi OR ssl) AND NOT consistent``

    Raises:
        ShapeMismatchError: If the two label volumes differ in shape
    """
    covered = _check_pair(y_semi, y_ssl)
    semi = y_semi.masks.astype(bool)
    ssl = y_ssl.masks.astype(bool)
    consistent = semi & ssl
    inconsistent = (semi | ssl) & ~consistent
    logger.debug(
        f"fused {int(consistent.sum())} consistent / {int(inconsistent.sum())} "
        "inconsistent pixels"
    )
    return _fused(consistent, inconsistent, covered)


def fuse_mode(
    y_semi: DenseLabelVolume, y_ssl: DenseLabelVolume, mode="consistency"
) -> FusedLabels:
    """Fuse under ``intersection`` or ``union`` (all certain) or ``consistency``."""
    mode = FusionMode(mode)
    if mode is FusionMode.CONSISTENCY:
        return fuse(y_semi, y_ssl)
    covered = _check_pair(y_semi, y_ssl)
    semi = y_semi.masks.astype(bool)
    ssl = y_ssl.masks.astype(bool)
    certain = semi & ssl if mode is FusionMode.INTERSECTION else semi | ssl
    return _fused(certain, np.zeros_like(certain), covered)
