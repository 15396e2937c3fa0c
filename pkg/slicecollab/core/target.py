"""Target segmentation network: training on manual and fused labels, inference."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from slicecollab.core.fusion import FusedLabels
from slicecollab.core.losses import TargetLossConfig, target_loss_terms
from slicecollab.core.nets import Checkpoint, SegNetConfig, UNet, build_segmentation_net
from slicecollab.core.semi import argmax_labels
from slicecollab.core.training import (
    EpochCallback,
    OptimizerSettings,
    augment_batch,
    forward_padded,
    iterate_minibatches,
    learning_rate_at,
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
from slicecollab.errors import ShapeMismatchError

logger = logging.getLogger(__name__)


def default_target_optimizer() -> OptimizerSettings:
    """Adam, lr 1e-4 halved every 30 epochs, batch 4, 100 epochs, augmented."""
    return OptimizerSettings(
        lr=1e-4,
        batch_size=4,
        epochs=100,
        lr_decay_step=30,
        lr_decay_gamma=0.5,
        augment=True,
    )


@dataclass(frozen=True, eq=False)
class TargetCase:
    """One training volume with per-slice supervision for the target network.

    Only ``certain.covered`` slices are trained on. ``manual`` flags the
    slices whose certain mask is a manual annotation; those never carry
    uncertain labels.
    """

    volume: Volume
    certain: DenseLabelVolume
    manual: np.ndarray
    uncertain: Optional[DenseLabelVolume] = None

    def __post_init__(self):
        manual = np.array(self.manual, dtype=bool).reshape(-1)
        if self.certain.shape != self.volume.shape:
            raise ShapeMismatchError(
                f"certain labels {self.certain.shape} "
                f"do not match volume {self.volume.shape}"
            )
        if manual.shape[0] != self.volume.num_slices:
            raise ShapeMismatchError("manual flags must have one entry per slice")
        if self.uncertain is not None:
            if self.uncertain.shape != self.volume.shape:
                raise ShapeMismatchError("uncertain labels do not match the volume")
            if self.uncertain.masks[manual].any():
                raise ValueError(
                    "uncertain labels supplied for a manually labeled slice"
                )
        object.__setattr__(self, "manual", manual)

    @property
    def case_id(self) -> str:
        return self.volume.case_id

    @property
    def slice_indices(self) -> np.ndarray:
        return np.flatnonzero(self.certain.covered)


def _with_manual(
    item: SparseAnnotatedVolume, masks: np.ndarray, source: LabelSource
) -> Tuple[DenseLabelVolume, np.ndarray]:
    center = central_slice_index(item.volume)
    masks = np.array(masks, dtype=np.uint8)
    masks[center] = item.central_label.pixels
    manual = np.zeros(item.volume.num_slices, dtype=bool)
    manual[center] = True
    return DenseLabelVolume(masks, source), manual


def target_case_from_fused(
    item: SparseAnnotatedVolume, fused: FusedLabels, use_uncertain: bool = True
) -> TargetCase:
    """
    Certain supervision = manual central mask + consistent labels elsewhere.

    With ``use_uncertain`` the inconsistent labels become the uncertain
    supervision; otherwise the case carries none (intersection and union
    fusion have no uncertain pixels).

    Raises:
        ValueError: If fused labels are missing for a non-central slice
    """
    if fused.shape != item.volume.shape:
        raise ShapeMismatchError(
            f"fused labels {fused.shape} do not match volume {item.volume.shape}"
        )
    center = central_slice_index(item.volume)
    missing = [
        n
        for n in range(item.volume.num_slices)
        if n != center and not fused.consistent.covered[n]
    ]
    if missing:
        raise ValueError(f"{item.case_id}: fused labels missing for slices {missing}")
    certain, manual = _with_manual(
        item, fused.consistent.masks, LabelSource.FUSED_CERTAIN
    )
    if not use_uncertain:
        return TargetCase(item.volume, certain, manual)
    uncertain = np.array(fused.inconsistent.masks)
    uncertain[center] = 0
    return TargetCase(
        item.volume,
        certain,
        manual,
        DenseLabelVolume(uncertain, LabelSource.FUSED_UNCERTAIN),
    )


def pseudo_label_case(
    item: SparseAnnotatedVolume, pseudo: DenseLabelVolume
) -> TargetCase:
    """Manual central mask plus a single pseudo-label set as certain labels."""
    if pseudo.shape != item.volume.shape:
        raise ShapeMismatchError("pseudo labels do not match the volume")
    certain, manual = _with_manual(item, pseudo.masks, pseudo.source)
    return TargetCase(item.volume, certain, manual)


def annotated_slices_case(
    volume: Volume, ground_truth: DenseLabelVolume, slice_indices: Sequence[int]
) -> TargetCase:
    """Fully supervised case restricted to the given annotated slices."""
    covered = np.zeros(volume.num_slices, dtype=bool)
    covered[list(slice_indices)] = True
    certain = DenseLabelVolume(ground_truth.masks, LabelSource.MANUAL, covered)
    return TargetCase(volume, certain, covered)


def central_slice_case(volume: Volume, ground_truth: DenseLabelVolume) -> TargetCase:
    """Training case of the central-slice-only baseline."""
    return annotated_slices_case(volume, ground_truth, [central_slice_index(volume)])


def full_volume_case(volume: Volume, ground_truth: DenseLabelVolume) -> TargetCase:
    """Training case of the fully supervised upper bound."""
    return annotated_slices_case(volume, ground_truth, range(volume.num_slices))


class _TargetSlices:
    """Flattened training slices of all target cases."""

    def __init__(self, cases: Sequence[TargetCase]):
        if len({c.volume.shape[1:] for c in cases}) != 1:
            raise ValueError("all volumes must share one in-plane size for batching")
        with_uncertain = {c.uncertain is not None for c in cases}
        if len(with_uncertain) != 1:
            raise ValueError("either every case or no case must carry uncertain labels")
        self.has_uncertain = with_uncertain.pop()

        images, certain, uncertain, manual = [], [], [], []
        for case in cases:
            for n in case.slice_indices:
                images.append(case.volume.slice(n))
                certain.append(case.certain.masks[n])
                manual.append(case.manual[n])
                if self.has_uncertain:
                    uncertain.append(case.uncertain.masks[n])
                else:
                    uncertain.append(np.zeros_like(case.certain.masks[n]))
        if not images:
            raise ValueError("target cases cover no slices")
        self.images = np.stack(images)
        self.certain = np.stack(certain)
        self.uncertain = np.stack(uncertain)
        self.manual = np.array(manual, dtype=bool)

    def __len__(self) -> int:
        return self.images.shape[0]


def target_training_step(
    net: UNet,
    optimizer: torch.optim.Optimizer,
    images: np.ndarray,
    certain: np.ndarray,
    manual: np.ndarray,
    uncertain: Optional[np.ndarray],
    cfg: TargetLossConfig,
    device: str = "cpu",
) -> Tuple[float, float]:
    """
    One update on ``certain + beta * uncertain`` computed from one forward pass.

    Returns:
        Tuple (certain term, uncertain term)
    """
    logits = forward_padded(net, to_tensor(images[:, None], device))
    probs = torch.softmax(logits, dim=1)[:, 1]
    y_uncertain = to_tensor(uncertain, device) if uncertain is not None else None
    certain_term, uncertain_term = target_loss_terms(
        probs,
        to_tensor(certain, device),
        torch.as_tensor(manual, dtype=torch.bool),
        y_uncertain,
        cfg,
    )
    loss = certain_term + cfg.beta * uncertain_term
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return certain_term.item(), uncertain_term.item()


def train_target(
    cases: Sequence[TargetCase],
    cfg: Optional[TargetLossConfig] = None,
    opt: Optional[OptimizerSettings] = None,
    net_config: Optional[SegNetConfig] = None,
    seed: int = 0,
    callback: Optional[EpochCallback] = None,
) -> Checkpoint:
    """
    Train the target segmentation network.

    Batches are drawn uniformly over every supervised slice of every case.

    Args:
        cases: Training cases (see :class:`TargetCase` and its builders)
        cfg: Certain / uncertain loss weights
        opt: Optimizer settings; defaults to :func:`default_target_optimizer`
        net_config: Network architecture
        seed: Seed for weights, batching and augmentation
        callback: Called with each epoch's record

    Returns:
        Checkpoint of the trained network

    Raises:
        ValueError: If there are no cases, or uncertain labels are only
            present for some of them
    """
    if not cases:
        raise ValueError("train_target needs at least one training case")
    cfg = cfg or TargetLossConfig()
    opt = opt or default_target_optimizer()
    table = _TargetSlices(cases)

    rng = seed_everything(seed)
    net = build_segmentation_net(net_config).to(opt.device)
    net.train()
    optimizer, scheduler = make_optimizer(net, opt)
    logger.info(
        f"Training target network on {len(table)} slices from {len(cases)} volumes"
    )

    history: List[Dict[str, float]] = []
    for epoch in range(opt.epochs):
        certain_losses, uncertain_losses, totals = [], [], []
        for idx in iterate_minibatches(len(table), opt.batch_size, rng):
            images, certain, uncertain = (
                table.images[idx],
                table.certain[idx],
                table.uncertain[idx],
            )
            if opt.augment:
                images, certain, uncertain = augment_batch(
                    rng, images, certain, uncertain
                )
            c_term, u_term = target_training_step(
                net,
                optimizer,
                images,
                certain,
                table.manual[idx],
                uncertain if table.has_uncertain else None,
                cfg,
                opt.device,
            )
            certain_losses.append(c_term)
            uncertain_losses.append(u_term)
            totals.append(c_term + cfg.beta * u_term)
        record = {
            "epoch": epoch,
            "lr": learning_rate_at(epoch, opt),
            "loss": float(np.mean(totals)),
            "certain_loss": float(np.mean(certain_losses)),
            "uncertain_loss": float(np.mean(uncertain_losses)),
        }
        if scheduler is not None:
            scheduler.step()
        history.append(record)
        logger.debug(f"target epoch {epoch}: {record}")
        if callback:
            callback(record)

    net.eval()
    return Checkpoint(net=net, epoch=opt.epochs, rng_seed=seed, loss_history=history)


def infer_volume(net: UNet, volume: Volume, device: str = "cpu") -> DenseLabelVolume:
    """
    Segment every slice of a volume.

    Slices whose size is not a multiple of ``2**depth`` are reflect-padded
    and the prediction cropped back.

    Returns:
        Argmax labels with ``source=predicted`` and the volume's shape
    """
    logits = predict(net, volume.voxels[:, None], device=device)
    return DenseLabelVolume(argmax_labels(logits), LabelSource.PREDICTED)
