"""Exception hierarchy for slicecollab."""

from typing import Optional


class SliceCollabError(Exception):
    """Base class for all errors raised by slicecollab."""


class VolumeFormatError(SliceCollabError):
    """A volume or mask file disagrees with its JSON sidecar."""


class ShapeMismatchError(SliceCollabError, ValueError):
    """Two arrays that must share a shape do not."""


class MetricUndefinedError(SliceCollabError, ValueError):
    """A metric cannot be computed for the given masks (e.g. an empty mask)."""


class ConfigError(SliceCollabError, ValueError):
    """A configuration is invalid or incomplete."""


class StageError(SliceCollabError):
    """A pipeline stage failed.

    Args:
        stage: Name of the failing stage
        cause: The underlying exception
    """

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        self.stage = stage
        self.cause = cause
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"stage '{stage}' failed{detail}")
