"""Volumes, networks, losses and the training stages."""

# This makes imports cleaner for other modules
from slicecollab.core.volume import (
    DenseLabelVolume,
    LabelSource,
    SliceMask,
    SparseAnnotatedVolume,
    Volume,
    central_slice_index,
)

__all__ = [
    "DenseLabelVolume",
    "LabelSource",
    "SliceMask",
    "SparseAnnotatedVolume",
    "Volume",
    "central_slice_index",
]
