"""On-disk layout of datasets and run artifacts."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from slicecollab import __version__
from slicecollab.core.nets import Checkpoint, load_checkpoint, save_checkpoint
from slicecollab.core.volume import (
    MASK_SUFFIX,
    VOLUME_SUFFIX,
    DenseLabelVolume,
    Volume,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)
from slicecollab.errors import VolumeFormatError
from slicecollab.pipeline.config import ExperimentConfig, config_hash

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IMAGES_DIR = "images"
LABELS_DIR = "labels"
MANIFEST_NAME = "manifest.json"

# Bumped whenever a stage's output format or semantics change
STAGE_VERSIONS = {
    "semi": 2,
    "registration": 1,
    "fusion": 1,
    "target": 1,
    "inference": 1,
    "evaluation": 1,
}


def write_dataset(
    cases: Sequence[Tuple[Volume, DenseLabelVolume]], data_dir: PathLike
) -> int:
    """
    Write volumes to ``images/<id>.vol`` and labels to ``labels/<id>.msk``.

    Returns:
        Number of cases written
    """
    data_dir = Path(data_dir)
    for volume, labels in cases:
        save_volume(volume, data_dir / IMAGES_DIR / f"{volume.case_id}{VOLUME_SUFFIX}")
        save_mask(
            labels,
            data_dir / LABELS_DIR / f"{volume.case_id}{MASK_SUFFIX}",
            volume.spacing_mm,
        )
    logger.info(f"Wrote {len(cases)} cases to {data_dir}")
    return len(cases)


def load_dataset(data_dir: PathLike) -> List[Tuple[Volume, DenseLabelVolume]]:
    """
    Read every case of a dataset directory, sorted by case id.

    Raises:
        VolumeFormatError: If a volume has no label file or shapes disagree
    """
    data_dir = Path(data_dir)
    image_paths = sorted((data_dir / IMAGES_DIR).glob(f"*{VOLUME_SUFFIX}"))
    if not image_paths:
        raise VolumeFormatError(
            f"No {VOLUME_SUFFIX} files under {data_dir / IMAGES_DIR}"
        )
    cases = []
    for image_path in image_paths:
        volume = load_volume(image_path)
        label_path = data_dir / LABELS_DIR / f"{volume.case_id}{MASK_SUFFIX}"
        if not label_path.exists():
            raise VolumeFormatError(
                f"Missing labels for {volume.case_id}: {label_path}"
            )
        labels = load_mask(label_path)
        if labels.shape != volume.shape:
            raise VolumeFormatError(
                f"{volume.case_id}: labels {labels.shape} "
                f"do not match volume {volume.shape}"
            )
        cases.append((volume, labels))
    logger.debug(f"Loaded {len(cases)} cases from {data_dir}")
    return cases


def load_mask_dir(directory: PathLike) -> Dict[str, DenseLabelVolume]:
    """All ``<id>.msk`` files of a directory keyed by case id."""
    masks = {}
    for path in sorted(Path(directory).glob(f"*{MASK_SUFFIX}")):
        masks[path.name[: -len(MASK_SUFFIX)]] = load_mask(path)
    return masks


def save_mask_dir(
    masks: Dict[str, DenseLabelVolume],
    directory: PathLike,
    spacings: Optional[Dict[str, Tuple[float, float, float]]] = None,
) -> None:
    directory = Path(directory)
    spacings = spacings or {}
    for case_id, labels in masks.items():
        save_mask(labels, directory / f"{case_id}{MASK_SUFFIX}", spacings.get(case_id))


def write_json(data: Any, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(rows: Sequence[Dict[str, Any]], path: PathLike) -> None:
    """Write plot-ready rows; column order follows the first row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows)).to_csv(path, index=False)


def write_manifest(
    directory: PathLike,
    cfg: ExperimentConfig,
    stages: Sequence[str],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Record what produced a directory's artifacts.

    The manifest holds the config hash, the seed, the package version and
    the version of every stage that contributed.
    """
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "package_version": __version__,
        "stage_versions": {stage: STAGE_VERSIONS[stage] for stage in stages},
        "config": cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = Path(directory) / MANIFEST_NAME
    write_json(manifest, path)
    return path


class ArtifactStore:
    """Per-fold stage directories under one run directory.

    Layout: ``<root>/fold_<i>/<stage>/`` holding ``<name>.pt`` checkpoints
    (``net.pt`` unless named otherwise) and ``<case>.msk`` label files.
    """

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def stage_dir(self, fold: int, stage: str) -> Path:
        path = self.root / f"fold_{fold}" / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    def checkpoint_path(self, fold: int, stage: str, name: str = "net") -> Path:
        return self.stage_dir(fold, stage) / f"{name}.pt"

    def save_checkpoint(
        self, fold: int, stage: str, checkpoint: Checkpoint, name: str = "net"
    ) -> Path:
        path = self.checkpoint_path(fold, stage, name)
        save_checkpoint(checkpoint, path)
        return path

    def load_checkpoint(self, fold: int, stage: str, name: str = "net") -> Checkpoint:
        return load_checkpoint(self.checkpoint_path(fold, stage, name))

    def save_labels(
        self,
        fold: int,
        stage: str,
        labels: Dict[str, DenseLabelVolume],
        spacings: Optional[Dict[str, Tuple[float, float, float]]] = None,
        suffix: str = "",
    ) -> Path:
        directory = self.stage_dir(fold, stage)
        if suffix:
            directory = directory / suffix
        save_mask_dir(labels, directory, spacings)
        logger.debug(f"Saved {len(labels)} {stage} label volumes to {directory}")
        return directory

    def load_labels(
        self, fold: int, stage: str, suffix: str = ""
    ) -> Dict[str, DenseLabelVolume]:
        directory = self.stage_dir(fold, stage)
        if suffix:
            directory = directory / suffix
        return load_mask_dir(directory)
