"""Utility functions for slicecollab."""

from slicecollab.utils.helpers import (
    EpochProgress,
    comparisons_table,
    console,
    display_summary,
    metrics_table,
)

__all__ = [
    "EpochProgress",
    "comparisons_table",
    "console",
    "display_summary",
    "metrics_table",
]
