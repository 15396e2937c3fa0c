"""Volume data model, raw file I/O, normalization and augmentation."""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from slicecollab.errors import ShapeMismatchError, VolumeFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VOLUME_SUFFIX = ".vol"
MASK_SUFFIX = ".msk"
SIDECAR_SUFFIX = ".json"

# On-disk dtypes are fixed little-endian
VOLUME_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("u1")

MIN_SLICES = 3
MIN_IN_PLANE = 8


class LabelSource(str, Enum):
    """Where a dense label volume came from."""

    MANUAL = "manual"
    SEMI = "semi"
    SSL = "ssl"
    FUSED_CERTAIN = "fused_certain"
    FUSED_UNCERTAIN = "fused_uncertain"
    PREDICTED = "predicted"


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _check_binary(array: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(array)
    if values.size and not np.isin(values, (0, 1)).all():
        raise ValueError(f"{what} must contain only 0 and 1")
    return values.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image indexed [slice][row][col] with physical spacing."""

    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = "case"

    def __post_init__(self):
        voxels = np.array(self.voxels, dtype=np.float32, copy=True)
        if voxels.ndim != 3:
            raise ValueError(f"Volume must be 3D, got shape {voxels.shape}")
        n, h, w = voxels.shape
        if n < MIN_SLICES or h < MIN_IN_PLANE or w < MIN_IN_PLANE:
            raise ValueError(
                f"Volume shape {voxels.shape} too small: need N >= {MIN_SLICES} "
                f"and H, W >= {MIN_IN_PLANE}"
            )
        if not np.isfinite(voxels).all():
            raise ValueError(f"Volume '{self.case_id}' has non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing_mm must be 3 positive values, got {spacing}")
        object.__setattr__(self, "voxels", _readonly(voxels))
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def num_slices(self) -> int:
        return self.voxels.shape[0]

    def slice(self, index: int) -> np.ndarray:
        return self.voxels[index]


@dataclass(frozen=True, eq=False)
class SliceMask:
    """Binary 2D mask attached to one slice of a volume."""

    pixels: np.ndarray
    slice_index: int

    def __post_init__(self):
        pixels = _check_binary(self.pixels, "SliceMask")
        if pixels.ndim != 2:
            raise ValueError(f"SliceMask must be 2D, got shape {pixels.shape}")
        object.__setattr__(self, "pixels", _readonly(pixels.copy()))
        object.__setattr__(self, "slice_index", int(self.slice_index))


@dataclass(frozen=True, eq=False)
class DenseLabelVolume:
    """Binary masks for every slice of a volume.

    ``covered`` marks the slices whose mask is defined; pseudo-label
    generators leave the central slice uncovered because the manual label is
    used there instead. Uncovered slices are stored as zeros.
    """

    masks: np.ndarray
    source: LabelSource = LabelSource.MANUAL
    covered: Optional[np.ndarray] = None

    def __post_init__(self):
        masks = _check_binary(self.masks, "DenseLabelVolume")
        if masks.ndim != 3:
            raise ValueError(f"DenseLabelVolume must be 3D, got shape {masks.shape}")
        if self.covered is None:
            covered = np.ones(masks.shape[0], dtype=bool)
        else:
            covered = np.array(self.covered, dtype=bool).reshape(-1)
            if covered.shape[0] != masks.shape[0]:
                raise ShapeMismatchError(
                    f"covered has {covered.shape[0]} entries "
                    f"for {masks.shape[0]} slices"
                )
        masks = masks.copy()
        masks[~covered] = 0
        object.__setattr__(self, "masks", _readonly(masks))
        object.__setattr__(self, "source", LabelSource(self.source))
        object.__setattr__(self, "covered", _readonly(covered))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.masks.shape)

    def slice_mask(self, index: int) -> SliceMask:
        return SliceMask(self.masks[index], index)


@dataclass(frozen=True, eq=False)
class SparseAnnotatedVolume:
    """A volume whose only label is the mask of its central slice."""

    volume: Volume
    central_label: SliceMask

    def __post_init__(self):
        expected = central_slice_index(self.volume)
        if self.central_label.slice_index != expected:
            raise ValueError(
                f"central label is on slice {self.central_label.slice_index}, "
                f"expected {expected}"
            )
        if self.central_label.pixels.shape != self.volume.shape[1:]:
            raise ShapeMismatchError(
                f"central label shape {self.central_label.pixels.shape} does not "
                f"match slice shape {self.volume.shape[1:]}"
            )

    @property
    def case_id(self) -> str:
        return self.volume.case_id

    @classmethod
    def from_dense(cls, volume: Volume, labels: DenseLabelVolume):
        """Keep only the central slice of a dense ground-truth volume."""
        center = central_slice_index(volume)
        return cls(volume, SliceMask(labels.masks[center], center))


def central_slice_index(volume: Volume) -> int:
    """Zero-based central slice; the higher middle for even slice counts."""
    return volume.num_slices // 2


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def _read_sidecar(path: Path) -> dict:
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise VolumeFormatError(f"Missing sidecar for {path}: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise VolumeFormatError(f"Unreadable sidecar {meta_path}: {e}") from e


def _write_sidecar(path: Path, meta: dict) -> None:
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_raw(path: Path, meta: dict, dtype: np.dtype, dtype_name: str) -> np.ndarray:
    if meta.get("dtype") != dtype_name:
        raise VolumeFormatError(
            f"{path}: sidecar dtype {meta.get('dtype')!r}, expected {dtype_name!r}"
        )
    shape = tuple(int(s) for s in meta.get("shape", ()))
    if len(shape) != 3:
        raise VolumeFormatError(f"{path}: sidecar shape must have 3 entries")
    if not path.exists():
        raise VolumeFormatError(f"Missing data file {path}")
    n_bytes = path.stat().st_size
    expected = int(np.prod(shape)) * dtype.itemsize
    if n_bytes != expected:
        raise VolumeFormatError(
            f"{path}: holds {n_bytes} bytes, sidecar shape {shape} needs {expected}"
        )
    return np.fromfile(path, dtype=dtype).reshape(shape)


def save_volume(volume: Volume, path: PathLike) -> None:
    """
    Write a volume as raw little-endian float32 plus a JSON sidecar.

    Args:
        volume: Volume to write
        path: Target ``<case>.vol`` path; the sidecar goes to ``<case>.vol.json``
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume.voxels, dtype=VOLUME_DTYPE).tofile(path)
    _write_sidecar(
        path,
        {
            "shape": list(volume.shape),
            "spacing_mm": list(volume.spacing_mm),
            "dtype": "float32",
        },
    )
    logger.debug(f"Wrote volume {volume.case_id} to {path}")


def load_volume(path: PathLike) -> Volume:
    """
    Read a volume written by :func:`save_volume`.

    Args:
        path: Path to the ``.vol`` file

    Returns:
        The volume; its case id is the file stem

    Raises:
        VolumeFormatError: If the sidecar is missing or disagrees with the data
    """
    path = Path(path)
    meta = _read_sidecar(path)
    voxels = _read_raw(path, meta, VOLUME_DTYPE, "float32")
    spacing = tuple(meta.get("spacing_mm", (1.0, 1.0, 1.0)))
    name = path.name
    case_id = name[: -len(VOLUME_SUFFIX)] if name.endswith(VOLUME_SUFFIX) else path.stem
    return Volume(voxels, spacing, case_id)


def save_mask(
    labels: DenseLabelVolume,
    path: PathLike,
    spacing_mm: Optional[Tuple[float, float, float]] = None,
) -> None:
    """
    Write a dense mask as raw uint8 plus a JSON sidecar.

    Args:
        labels: Masks to write
        path: Target ``<case>.msk`` path
        spacing_mm: Optional voxel spacing recorded for evaluation
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(labels.masks, dtype=MASK_DTYPE).tofile(path)
    meta = {
        "shape": list(labels.shape),
        "dtype": "uint8",
        "source": labels.source.value,
        "covered": [int(c) for c in labels.covered],
    }
    if spacing_mm is not None:
        meta["spacing_mm"] = [float(s) for s in spacing_mm]
    _write_sidecar(path, meta)


def load_mask(path: PathLike) -> DenseLabelVolume:
    """Read a mask written by :func:`save_mask`."""
    path = Path(path)
    meta = _read_sidecar(path)
    masks = _read_raw(path, meta, MASK_DTYPE, "uint8")
    if not np.isin(masks, (0, 1)).all():
        raise VolumeFormatError(f"{path}: mask values outside {{0, 1}}")
    covered = meta.get("covered")
    return DenseLabelVolume(
        masks,
        LabelSource(meta.get("source", LabelSource.MANUAL.value)),
        None if covered is None else np.asarray(covered, dtype=bool),
    )


def read_mask_spacing(path: PathLike) -> Optional[Tuple[float, float, float]]:
    """Spacing recorded in a mask sidecar, if any."""
    spacing = _read_sidecar(Path(path)).get("spacing_mm")
    return None if spacing is None else tuple(float(s) for s in spacing)


# ---------------------------------------------------------------------------
# Preprocessing and augmentation
# ---------------------------------------------------------------------------


def normalize(volume: Volume) -> Volume:
    """Per-volume z-score; constant volumes map to zeros."""
    voxels = volume.voxels.astype(np.float64)
    std = voxels.std()
    if np.ptp(voxels) == 0 or std == 0:
        out = np.zeros_like(voxels)
    else:
        out = (voxels - voxels.mean()) / std
    return Volume(out, volume.spacing_mm, volume.case_id)


# All of these are pixel permutations, so labels need no interpolation.
AUGMENTATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda a: a,
    "rot90": lambda a: np.rot90(a, 1),
    "rot180": lambda a: np.rot90(a, 2),
    "rot270": lambda a: np.rot90(a, 3),
    "flip_horizontal": lambda a: a[:, ::-1],
    "flip_vertical": lambda a: a[::-1, :],
}

# Safe for non-square slices
SHAPE_PRESERVING = ("identity", "rot180", "flip_horizontal", "flip_vertical")


def draw_augmentation(rng: np.random.Generator, shape: Tuple[int, int]) -> str:
    """Draw one augmentation name; quarter turns only for square slices."""
    square = shape[0] == shape[1]
    names: List[str] = list(AUGMENTATIONS) if square else list(SHAPE_PRESERVING)
    return names[int(rng.integers(len(names)))]


def apply_augmentation(array: np.ndarray, name: str) -> np.ndarray:
    """
    Apply a named augmentation to a 2D array.

    Args:
        array: 2D image or mask
        name: Key of :data:`AUGMENTATIONS`

    Returns:
        A new contiguous array
    """
    try:
        transform = AUGMENTATIONS[name]
    except KeyError:
        raise ValueError(f"Unknown augmentation {name!r}") from None
    return np.ascontiguousarray(transform(np.asarray(array)))


def augment(
    image: np.ndarray, label: SliceMask, rng_seed: int
) -> Tuple[np.ndarray, SliceMask]:
    """
    Apply one randomly drawn rotation or flip to an image slice and its label.

    Args:
        image: 2D slice
        label: Mask of the same slice
        rng_seed: Seed selecting the transform

    Returns:
        Transformed image and label
    """
    image = np.asarray(image)
    if image.shape != label.pixels.shape:
        raise ShapeMismatchError(
            f"slice shape {image.shape} does not match label {label.pixels.shape}"
        )
    name = draw_augmentation(np.random.default_rng(rng_seed), image.shape)
    return (
        apply_augmentation(image, name),
        SliceMask(apply_augmentation(label.pixels, name), label.slice_index),
    )
