"""Synthetic MR-like phantoms with an analytic ground-truth mask.

Each case holds one bright elliptical object inside a dim static body. The
object's cross-section center and radii drift smoothly from slice to slice
so that adjacent slices stay registrable; the ground truth is the implicit
ellipse equation evaluated at pixel centers.
"""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from slicecollab.core.volume import DenseLabelVolume, LabelSource, Volume
from slicecollab.errors import ConfigError

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 8
FOV_MARGIN_PX = 1.0


@dataclass
class PhantomConfig:
    """Settings for :func:`generate_phantom_dataset`."""

    count: int = 20
    shape: Tuple[int, int, int] = (17, 64, 64)
    noise_sigma: float = 0.05
    max_drift_px: float = 1.0
    radius_range_px: Tuple[float, float] = (8.0, 14.0)
    seed: int = 0
    bias_strength: float = 0.2
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Fixed per-slice (dy, dx) shift of the object; replaces the random drift
    translation_px: Optional[Tuple[float, float]] = None
    object_intensity: float = 1.0
    body_intensity: float = 0.35

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.radius_range_px = tuple(float(r) for r in self.radius_range_px)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.translation_px is not None:
            self.translation_px = tuple(float(t) for t in self.translation_px)
        if self.count < 1:
            raise ConfigError("phantom count must be at least 1")
        if len(self.shape) != 3:
            raise ConfigError("phantom shape must be (N, H, W)")
        low, high = self.radius_range_px
        if not 0 < low <= high:
            raise ConfigError(f"invalid radius_range_px {self.radius_range_px}")
        if self.max_drift_px < 0 or self.noise_sigma < 0:
            raise ConfigError("max_drift_px and noise_sigma must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown phantom config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PhantomConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ObjectGeometry:
    """Per-slice ellipse parameters of one phantom object, in pixels."""

    center_y: np.ndarray
    center_x: np.ndarray
    radius_y: np.ndarray
    radius_x: np.ndarray

    def fits(self, height: int, width: int, margin: float = FOV_MARGIN_PX) -> bool:
        return bool(
            (self.center_y - self.radius_y >= margin).all()
            and (self.center_y + self.radius_y <= height - 1 - margin).all()
            and (self.center_x - self.radius_x >= margin).all()
            and (self.center_x + self.radius_x <= width - 1 - margin).all()
        )


def _smooth_walk(rng: np.random.Generator, n: int, center: int, max_step: float):
    """Path whose per-slice steps are bounded by ``max_step``, zero at center."""
    phase = rng.uniform(0.0, 2.0 * np.pi)
    cycles = rng.uniform(0.5, 1.5)
    amplitude = rng.uniform(0.5, 1.0) * max_step
    steps = amplitude * np.sin(2.0 * np.pi * cycles * np.arange(n) / n + phase)
    steps[0] = 0.0
    path = np.cumsum(steps)
    return path - path[center]


def _draw_geometry(
    rng: np.random.Generator, config: PhantomConfig, drift_scale: float
) -> ObjectGeometry:
    n, h, w = config.shape
    center = n // 2
    low, high = config.radius_range_px
    ry0, rx0 = rng.uniform(low, high, size=2)
    cy0 = h / 2.0 + rng.uniform(-h / 8.0, h / 8.0)
    cx0 = w / 2.0 + rng.uniform(-w / 8.0, w / 8.0)
    offsets = np.arange(n, dtype=np.float64) - center

    if config.translation_px is not None:
        dy, dx = config.translation_px
        return ObjectGeometry(
            cy0 + drift_scale * dy * offsets,
            cx0 + drift_scale * dx * offsets,
            np.full(n, ry0),
            np.full(n, rx0),
        )

    max_step = config.max_drift_px * drift_scale
    path_y = _smooth_walk(rng, n, center, max_step)
    path_x = _smooth_walk(rng, n, center, max_step)
    # Radii taper quadratically toward the ends; per-slice change <= max_step / 2
    half = max(center, 1)
    taper_y = min(0.4, max_step * half / (4.0 * ry0))
    taper_x = min(0.4, max_step * half / (4.0 * rx0))
    relative = (offsets / half) ** 2
    return ObjectGeometry(
        cy0 + path_y,
        cx0 + path_x,
        ry0 * (1.0 - taper_y * relative),
        rx0 * (1.0 - taper_x * relative),
    )


def object_masks(geometry: ObjectGeometry, height: int, width: int) -> np.ndarray:
    """Evaluate the implicit ellipse equation at pixel centers for every slice."""
    yy, xx = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    cy = geometry.center_y[:, None, None]
    cx = geometry.center_x[:, None, None]
    ry = geometry.radius_y[:, None, None]
    rx = geometry.radius_x[:, None, None]
    implicit = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return (implicit <= 1.0).astype(np.uint8)


def body_mask(height: int, width: int) -> np.ndarray:
    """Static elliptical body region that surrounds the object."""
    yy, xx = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    implicit = ((yy - cy) / (0.45 * height)) ** 2 + ((xx - cx) / (0.45 * width)) ** 2
    return implicit <= 1.0


def render_clean(masks: np.ndarray, config: PhantomConfig) -> np.ndarray:
    """Noise- and bias-free intensities for the given object masks."""
    _, h, w = masks.shape
    clean = np.where(body_mask(h, w), config.body_intensity, 0.0)[None].repeat(
        masks.shape[0], axis=0
    )
    clean[masks.astype(bool)] = config.object_intensity
    return clean


def clean_threshold(config: PhantomConfig) -> float:
    """Threshold separating the object from every other clean intensity."""
    return 0.5 * (config.object_intensity + max(config.body_intensity, 0.0))


def _bias_field(rng: np.random.Generator, shape: Tuple[int, int, int], strength: float):
    n, h, w = shape
    z = np.linspace(-1.0, 1.0, n)[:, None, None]
    y = np.linspace(-1.0, 1.0, h)[None, :, None]
    x = np.linspace(-1.0, 1.0, w)[None, None, :]
    coeffs = rng.uniform(-1.0, 1.0, size=4) / 4.0
    smooth = coeffs[0] * y + coeffs[1] * x + coeffs[2] * x * y + coeffs[3] * z
    return 1.0 + strength * smooth


def _generate_case(
    rng: np.random.Generator, config: PhantomConfig, case_id: str
) -> Tuple[Volume, DenseLabelVolume]:
    n, h, w = config.shape
    drift_scale = 1.0
    geometry = None
    for attempt in range(MAX_ATTEMPTS):
        geometry = _draw_geometry(rng, config, drift_scale)
        if geometry.fits(h, w):
            break
        logger.debug(f"{case_id}: object leaves field of view, clamping drift")
        drift_scale *= 0.5
    else:
        # Still outside after clamping: fall back to a centered static object
        center_y = np.full(n, (h - 1) / 2.0)
        center_x = np.full(n, (w - 1) / 2.0)
        limit_y = (h - 1) / 2.0 - FOV_MARGIN_PX
        limit_x = (w - 1) / 2.0 - FOV_MARGIN_PX
        geometry = ObjectGeometry(
            center_y,
            center_x,
            np.minimum(geometry.radius_y, limit_y),
            np.minimum(geometry.radius_x, limit_x),
        )

    masks = object_masks(geometry, h, w)
    clean = render_clean(masks, config)
    voxels = clean * _bias_field(rng, config.shape, config.bias_strength)
    if config.noise_sigma > 0:
        voxels = voxels + rng.normal(0.0, config.noise_sigma, size=voxels.shape)
    volume = Volume(voxels.astype(np.float32), config.spacing_mm, case_id)
    return volume, DenseLabelVolume(masks, LabelSource.MANUAL)


def generate_phantom_dataset(
    count: int,
    shape: Tuple[int, int, int],
    rng_seed: int,
    config: Optional[PhantomConfig] = None,
) -> List[Tuple[Volume, DenseLabelVolume]]:
    """
    Generate deterministic phantom cases with exact ground-truth masks.

    Args:
        count: Number of cases
        shape: Volume shape (N, H, W); odd N keeps the central slice exact
        rng_seed: Seed; identical seeds give bit-identical datasets
        config: Remaining phantom settings (count, shape and seed are overridden)

    Returns:
        List of (volume, ground-truth labels) pairs
    """
    base = config.to_dict() if config is not None else {}
    base.update(count=count, shape=tuple(shape), seed=rng_seed)
    config = PhantomConfig(**base)

    children = np.random.SeedSequence(config.seed).spawn(config.count)
    cases = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        cases.append(_generate_case(rng, config, f"phantom_{index:03d}"))
    logger.info(f"Generated {config.count} phantom cases of shape {config.shape}")
    return cases
