"""Semi-supervised pseudo-label generator (self-training on unlabeled slices).

Training runs in two phases. Before ``K1`` only the labeled central slices
are used. From ``K1`` on, pseudo labels for every non-central slice are
regenerated from the current weights before each epoch and mixed into the
objective with the ramped weight ``alpha(t)``.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from slicecollab.core.losses import (
    SemiLossConfig,
    alpha_schedule,
    dice_ce_loss,
    semi_loss,
)
from slicecollab.core.nets import (
    Checkpoint,
    SegNetConfig,
    UNet,
    build_segmentation_net,
)
from slicecollab.core.training import (
    EpochCallback,
    OptimizerSettings,
    augment_batch,
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

logger = logging.getLogger(__name__)

EXTRA_EPOCHS_AFTER_K2 = 20


@dataclass
class SemiTrainState:
    """Result of :func:`train_semi`."""

    net: UNet
    epoch: int
    pseudo_labels: Dict[str, DenseLabelVolume]
    rng_seed: int
    history: List[Dict[str, float]] = field(default_factory=list)
    # Weights saved when the pseudo-labeled phase begins
    k1_state: Optional[Dict[str, torch.Tensor]] = None
    k1_epoch: Optional[int] = None

    def checkpoint(self) -> Checkpoint:
        """Checkpoint of the final weights."""
        return Checkpoint(self.net, self.epoch, self.rng_seed, self.history)

    def k1_checkpoint(self) -> Checkpoint:
        """
        Checkpoint of the weights before any pseudo-labeled update.

        Raises:
            ValueError: If the state carries no snapshot
        """
        if self.k1_state is None:
            raise ValueError("training state has no K1 snapshot")
        net = copy.deepcopy(self.net)
        net.load_state_dict(self.k1_state)
        net.eval()
        epoch = self.epoch if self.k1_epoch is None else self.k1_epoch
        return Checkpoint(net, epoch, self.rng_seed, self.history[:epoch])


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel class of (B, 2, H, W) logits; exact ties go to background."""
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


def generate_pseudo_labels(
    net: UNet, volume: Volume, device: str = "cpu"
) -> DenseLabelVolume:
    """
    Argmax pseudo labels for every non-central slice of a volume.

    Args:
        net: Segmentation network (evaluated with inference statistics)
        volume: Volume to label

    Returns:
        Labels with ``source=semi``; the central slice is left uncovered
    """
    center = central_slice_index(volume)
    logits = predict(net, volume.voxels[:, None], device=device)
    covered = np.ones(volume.num_slices, dtype=bool)
    covered[center] = False
    return DenseLabelVolume(argmax_labels(logits), LabelSource.SEMI, covered)


def _check_in_plane(volumes: Sequence[Volume]) -> Tuple[int, int]:
    shapes = {v.shape[1:] for v in volumes}
    if len(shapes) != 1:
        raise ValueError(
            "all volumes must share one in-plane size for batching, "
            f"got {sorted(shapes)}"
        )
    return shapes.pop()


class _SliceTable:
    """Labeled central slices and unlabeled non-central slices of a dataset."""

    def __init__(self, dataset: Sequence[SparseAnnotatedVolume]):
        _check_in_plane([item.volume for item in dataset])
        self.labeled_images = np.stack(
            [item.volume.slice(central_slice_index(item.volume)) for item in dataset]
        )
        self.labeled_masks = np.stack([item.central_label.pixels for item in dataset])
        images, owners = [], []
        for index, item in enumerate(dataset):
            center = central_slice_index(item.volume)
            for n in range(item.volume.num_slices):
                if n != center:
                    images.append(item.volume.slice(n))
                    owners.append((index, n))
        self.unlabeled_images = np.stack(images)
        self.owners = owners


def semi_training_step(
    net: UNet,
    optimizer: torch.optim.Optimizer,
    labeled: Tuple[np.ndarray, np.ndarray],
    unlabeled: Optional[Tuple[np.ndarray, np.ndarray]],
    t: int,
    cfg: SemiLossConfig,
    device: str = "cpu",
) -> Tuple[float, float]:
    """
    One optimizer update on a labeled and an optional pseudo-labeled batch.

    While ``alpha(t)`` is zero the unlabeled batch is not forwarded at all, so
    it cannot influence the update through batch statistics either.

    Args:
        net: Network in training mode
        optimizer: Its optimizer
        labeled: (images (B, H, W), masks (B, H, W))
        unlabeled: Same for pseudo-labeled slices, or None
        t: Current epoch
        cfg: Loss configuration

    Returns:
        Tuple (labeled term, unweighted unlabeled term)
    """
    alpha = alpha_schedule(t, cfg)
    use_unlabeled = unlabeled is not None and alpha > 0
    images = labeled[0]
    if use_unlabeled:
        images = np.concatenate([labeled[0], unlabeled[0]])
    logits = forward_padded(net, to_tensor(images[:, None], device))
    probs = torch.softmax(logits, dim=1)[:, 1]
    n_lab = labeled[0].shape[0]
    y_lab = to_tensor(labeled[1], device)
    pred_unlab = probs[n_lab:] if use_unlabeled else None
    y_pseudo = to_tensor(unlabeled[1], device) if use_unlabeled else None

    loss = semi_loss(probs[:n_lab], y_lab, pred_unlab, y_pseudo, t, cfg)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    with torch.no_grad():
        labeled_term = dice_ce_loss(
            probs[:n_lab], y_lab, cfg.gamma, cfg.sigma, cfg.dice_per_image
        ).item()
        unlabeled_term = 0.0
        if use_unlabeled:
            unlabeled_term = dice_ce_loss(
                pred_unlab, y_pseudo, cfg.gamma, cfg.sigma, cfg.dice_per_image
            ).item()
    return labeled_term, unlabeled_term


def train_semi(
    dataset: Sequence[SparseAnnotatedVolume],
    cfg: Optional[SemiLossConfig] = None,
    opt: Optional[OptimizerSettings] = None,
    total_epochs: Optional[int] = None,
    net_config: Optional[SegNetConfig] = None,
    seed: int = 0,
    callback: Optional[EpochCallback] = None,
) -> SemiTrainState:
    """
    Train the self-training segmentation network.

    Args:
        dataset: Sparsely annotated training volumes
        cfg: Loss weights and ramp constants
        opt: Optimizer settings (Adam, lr 1e-4 by default)
        total_epochs: Epoch count; defaults to ``K2 + 20``
        net_config: Network architecture
        seed: Seed for weights, batching and augmentation
        callback: Called with each epoch's record

    Returns:
        Final state, including pseudo labels from the final weights

    Raises:
        ValueError: If the dataset is empty
    """
    if not dataset:
        raise ValueError("train_semi needs at least one training volume")
    cfg = cfg or SemiLossConfig()
    opt = opt or OptimizerSettings()
    if total_epochs is None:
        total_epochs = cfg.K2 + EXTRA_EPOCHS_AFTER_K2
    if total_epochs < cfg.K2:
        logger.warning(
            f"train_semi: {total_epochs} epochs stop before the ramp "
            f"saturates at K2={cfg.K2}"
        )

    rng = seed_everything(seed)
    net = build_segmentation_net(net_config).to(opt.device)
    net.train()
    optimizer, _ = make_optimizer(net, opt)
    table = _SliceTable(dataset)
    pseudo_masks = np.zeros_like(table.unlabeled_images, dtype=np.uint8)
    history: List[Dict[str, float]] = []
    k1_state = None

    for t in range(total_epochs):
        if t == cfg.K1:
            k1_state = copy.deepcopy(net.state_dict())
            logger.info(f"Epoch {t}: introducing pseudo-labeled slices")
        if t >= cfg.K1:
            logits = predict(net, table.unlabeled_images[:, None], device=opt.device)
            pseudo_masks = argmax_labels(logits)

        alpha = alpha_schedule(t, cfg)
        labeled_losses, unlabeled_losses = [], []
        labeled_count = table.labeled_images.shape[0]
        if alpha == 0:
            batches = [
                (idx, None)
                for idx in iterate_minibatches(labeled_count, opt.batch_size, rng)
            ]
        else:
            unlabeled_batches = list(
                iterate_minibatches(len(table.owners), opt.batch_size, rng)
            )
            repeats = math.ceil(len(unlabeled_batches) * opt.batch_size / labeled_count)
            labeled_order = np.concatenate(
                [rng.permutation(labeled_count) for _ in range(repeats)]
            )
            batches = [
                (labeled_order[i * opt.batch_size : (i + 1) * opt.batch_size], idx)
                for i, idx in enumerate(unlabeled_batches)
            ]

        for lab_idx, unlab_idx in batches:
            lab_images = table.labeled_images[lab_idx]
            lab_masks = table.labeled_masks[lab_idx]
            if opt.augment:
                lab_images, lab_masks = augment_batch(rng, lab_images, lab_masks)
            unlabeled = None
            if unlab_idx is not None:
                unlab_images = table.unlabeled_images[unlab_idx]
                unlab_masks = pseudo_masks[unlab_idx]
                if opt.augment:
                    unlab_images, unlab_masks = augment_batch(
                        rng, unlab_images, unlab_masks
                    )
                unlabeled = (unlab_images, unlab_masks)
            lab_loss, unlab_loss = semi_training_step(
                net, optimizer, (lab_images, lab_masks), unlabeled, t, cfg, opt.device
            )
            labeled_losses.append(lab_loss)
            if unlabeled is not None:
                unlabeled_losses.append(unlab_loss)

        record = {
            "epoch": t,
            "alpha": alpha,
            "labeled_loss": float(np.mean(labeled_losses)),
            "unlabeled_loss": (
                float(np.mean(unlabeled_losses)) if unlabeled_losses else 0.0
            ),
        }
        history.append(record)
        logger.debug(f"semi epoch {t}: {record}")
        if callback:
            callback(record)

    k1_epoch = min(cfg.K1, total_epochs)
    if k1_state is None:
        k1_state = copy.deepcopy(net.state_dict())
    pseudo_labels = {
        item.case_id: generate_pseudo_labels(net, item.volume, opt.device)
        for item in dataset
    }
    return SemiTrainState(
        net=net,
        epoch=total_epochs,
        pseudo_labels=pseudo_labels,
        rng_seed=seed,
        history=history,
        k1_state=k1_state,
        k1_epoch=k1_epoch,
    )
