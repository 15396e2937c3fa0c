"""Self-supervised slice-to-slice registration and central-label propagation."""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from slicecollab.core.nets import (
    Checkpoint,
    SegNetConfig,
    UNet,
    build_registration_net,
)
from slicecollab.core.training import (
    EpochCallback,
    OptimizerSettings,
    forward_padded,
    iterate_minibatches,
    make_optimizer,
    predict,
    seed_everything,
    to_tensor,
)
from slicecollab.core.volume import (
    DenseLabelVolume,
    LabelSource,
    SparseAnnotatedVolume,
    Volume,
    central_slice_index,
)
from slicecollab.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

WARP_MODES = ("bilinear", "label")


@dataclass
class RegistrationConfig:
    """Registration objective and propagation settings."""

    smoothness_weight: float = 0.01
    label_threshold: float = 0.5

    def __post_init__(self):
        if self.smoothness_weight < 0:
            raise ConfigError("smoothness_weight must be non-negative")
        if not 0 < self.label_threshold < 1:
            raise ConfigError("label_threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RegistrationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown registration config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def default_registration_optimizer() -> OptimizerSettings:
    """Adam with lr 0.01 and batch size 32 for 100 epochs."""
    return OptimizerSettings(lr=0.01, batch_size=32, epochs=100)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense (dy, dx) displacement in pixels, shape (2, H, W)."""

    field: np.ndarray

    def __post_init__(self):
        values = np.array(self.field, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != 2:
            raise ValueError(
                f"displacement field must be (2, H, W), got {values.shape}"
            )
        if not np.isfinite(values).all():
            raise ValueError("displacement field must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "field", values)

    @classmethod
    def constant(cls, shape: Tuple[int, int], dy: float, dx: float):
        values = np.empty((2,) + tuple(shape))
        values[0], values[1] = dy, dx
        return cls(values)


def warp_tensor(images: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """
    Differentiable backward warp: ``out(x) = images(x + field(x))``.

    Args:
        images: (B, C, H, W)
        field: (B, 2, H, W) displacement (dy, dx) in pixels

    Returns:
        (B, C, H, W) bilinear samples; out-of-bounds samples read zero
    """
    height, width = images.shape[-2:]
    ys = torch.arange(height, dtype=field.dtype, device=field.device)
    xs = torch.arange(width, dtype=field.dtype, device=field.device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    sample_y = grid_y + field[:, 0]
    sample_x = grid_x + field[:, 1]
    grid = torch.stack(
        [
            2.0 * sample_x / max(width - 1, 1) - 1.0,
            2.0 * sample_y / max(height - 1, 1) - 1.0,
        ],
        dim=-1,
    )
    return F.grid_sample(
        images.to(field.dtype),
        grid,
        mode="bilinear",
        padding_mode="zeros",
        align_corners=True,
    )


def warp(
    image: np.ndarray,
    field: Union[DisplacementField, np.ndarray],
    mode: str = "bilinear",
    threshold: float = 0.5,
) -> np.ndarray:
    """
    Warp a 2D image or binary mask through a displacement field.

    Args:
        image: (H, W) array
        field: Displacement field of shape (2, H, W)
        mode: ``bilinear`` for intensities, ``label`` to re-binarize
        threshold: Binarization threshold for ``label`` mode

    Returns:
        Float64 image, or uint8 mask in ``label`` mode
    """
    if mode not in WARP_MODES:
        raise ValueError(f"Unknown warp mode {mode!r}; expected one of {WARP_MODES}")
    if not isinstance(field, DisplacementField):
        field = DisplacementField(field)
    image = np.asarray(image)
    if image.shape != field.field.shape[1:]:
        raise ShapeMismatchError(
            f"image shape {image.shape} does not match field {field.field.shape[1:]}"
        )

    if not field.field.any():
        warped = image.astype(np.float64)
    else:
        warped = (
            warp_tensor(
                torch.as_tensor(image, dtype=torch.float64)[None, None],
                torch.as_tensor(field.field)[None],
            )[0, 0]
            .numpy()
        )
    if mode == "label":
        return (warped >= threshold).astype(np.uint8)
    return warped


def registration_loss(
    moving: torch.Tensor,
    fixed: torch.Tensor,
    field: torch.Tensor,
    smoothness_weight: float,
):
    """
    Mean squared intensity difference plus weighted field smoothness.

    Returns:
        Tuple (total, similarity, smoothness)
    """
    warped = warp_tensor(moving, field)
    similarity = ((warped - fixed) ** 2).mean()
    grad_y = field[:, :, 1:, :] - field[:, :, :-1, :]
    grad_x = field[:, :, :, 1:] - field[:, :, :, :-1]
    smoothness = (grad_y**2).mean() + (grad_x**2).mean()
    return similarity + smoothness_weight * smoothness, similarity, smoothness


def adjacent_pairs(volume: Volume) -> np.ndarray:
    """Every adjacent (moving, fixed) slice pair in both directions, (P, 2, H, W)."""
    voxels = volume.voxels
    pairs = []
    for n in range(volume.num_slices - 1):
        pairs.append(np.stack([voxels[n], voxels[n + 1]]))
        pairs.append(np.stack([voxels[n + 1], voxels[n]]))
    return np.stack(pairs)


def train_registration(
    dataset: Sequence[Volume],
    opt: Optional[OptimizerSettings] = None,
    epochs: Optional[int] = None,
    net_config: Optional[SegNetConfig] = None,
    cfg: Optional[RegistrationConfig] = None,
    seed: int = 0,
    callback: Optional[EpochCallback] = None,
) -> Checkpoint:
    """
    Learn a slice-to-slice registration network without labels.

    Args:
        dataset: Training volumes; every adjacent pair is used in both directions
        opt: Optimizer settings (Adam, lr 0.01, batch 32 by default)
        epochs: Overrides ``opt.epochs``
        net_config: Backbone architecture
        cfg: Registration objective settings
        seed: Seed for weights and batching
        callback: Called with each epoch's record

    Returns:
        Checkpoint of the trained registration network

    Raises:
        ValueError: If the dataset is empty
    """
    if not dataset:
        raise ValueError("train_registration needs at least one volume")
    opt = opt or default_registration_optimizer()
    cfg = cfg or RegistrationConfig()
    epochs = opt.epochs if epochs is None else epochs
    if len({v.shape[1:] for v in dataset}) != 1:
        raise ValueError("all volumes must share one in-plane size for batching")

    rng = seed_everything(seed)
    net = build_registration_net(net_config).to(opt.device)
    net.train()
    optimizer, scheduler = make_optimizer(net, opt)
    pairs = np.concatenate([adjacent_pairs(v) for v in dataset])
    logger.info(f"Training registration on {pairs.shape[0]} slice pairs")

    history: List[Dict[str, float]] = []
    for epoch in range(epochs):
        totals, similarities, smoothnesses = [], [], []
        for idx in iterate_minibatches(pairs.shape[0], opt.batch_size, rng):
            batch = to_tensor(pairs[idx], opt.device)
            field = forward_padded(net, batch)
            loss, similarity, smoothness = registration_loss(
                batch[:, :1], batch[:, 1:], field, cfg.smoothness_weight
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            totals.append(loss.item())
            similarities.append(similarity.item())
            smoothnesses.append(smoothness.item())
        if scheduler is not None:
            scheduler.step()
        record = {
            "epoch": epoch,
            "loss": float(np.mean(totals)),
            "similarity": float(np.mean(similarities)),
            "smoothness": float(np.mean(smoothnesses)),
        }
        history.append(record)
        logger.debug(f"registration epoch {epoch}: {record}")
        if callback:
            callback(record)

    net.eval()
    return Checkpoint(net=net, epoch=epochs, rng_seed=seed, loss_history=history)


def predict_fields(
    net: UNet, moving: np.ndarray, fixed: np.ndarray, device: str = "cpu"
) -> np.ndarray:
    """Displacement fields (P, 2, H, W) for stacked (P, H, W) moving/fixed slices."""
    return predict(net, np.stack([moving, fixed], axis=1), device=device)


def propagation_pairs(num_slices: int) -> List[Tuple[int, int]]:
    """(moving, fixed) slice indices of both chains, each ordered outward."""
    center = num_slices // 2
    upward = [(n, n + 1) for n in range(center, num_slices - 1)]
    downward = [(n, n - 1) for n in range(center, 0, -1)]
    return upward + downward


def propagate_labels(
    reg_net: UNet,
    item: SparseAnnotatedVolume,
    cfg: Optional[RegistrationConfig] = None,
    device: str = "cpu",
) -> DenseLabelVolume:
    """
    Carry the central mask outward through chained slice-to-slice warps.

    Each field is estimated on the original slices (S_n moving, S_n+1 fixed)
    and applied to the label propagated so far.

    Args:
        reg_net: Trained registration network
        item: Volume with its central label
        cfg: Threshold for re-binarizing warped labels

    Returns:
        Labels with ``source=ssl``; the central slice holds the manual mask
    """
    cfg = cfg or RegistrationConfig()
    volume = item.volume
    center = central_slice_index(volume)
    masks = np.zeros(volume.shape, dtype=np.uint8)
    masks[center] = item.central_label.pixels

    pairs = propagation_pairs(volume.num_slices)
    moving = np.stack([volume.slice(m) for m, _ in pairs])
    fixed = np.stack([volume.slice(f) for _, f in pairs])
    fields_ = predict_fields(reg_net, moving, fixed, device)

    for (source, target), field in zip(pairs, fields_):
        masks[target] = warp(
            masks[source], DisplacementField(field), "label", cfg.label_threshold
        )
    return DenseLabelVolume(masks, LabelSource.SSL)
