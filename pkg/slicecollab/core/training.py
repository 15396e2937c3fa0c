"""Shared training plumbing: optimizer settings, seeding, batching and inference."""

import contextlib
import logging
import random
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Dict, Iterator, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from slicecollab.core.volume import apply_augmentation, draw_augmentation
from slicecollab.errors import ConfigError

logger = logging.getLogger(__name__)

INFERENCE_BATCH_SIZE = 16

EpochCallback = Callable[[Dict[str, float]], None]


@dataclass
class OptimizerSettings:
    """Adam settings and an optional step decay of the learning rate."""

    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    lr_decay_step: Optional[int] = None
    lr_decay_gamma: float = 0.5
    weight_decay: float = 0.0
    augment: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be positive, batch_size >= 1, epochs >= 0")
        if self.lr_decay_step is not None and self.lr_decay_step < 1:
            raise ConfigError("lr_decay_step must be a positive number of epochs")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimizerSettings":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown optimizer keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def learning_rate_at(epoch: int, opt: OptimizerSettings) -> float:
    """Learning rate in effect during ``epoch`` under the step decay."""
    if opt.lr_decay_step is None:
        return opt.lr
    return opt.lr * opt.lr_decay_gamma ** (epoch // opt.lr_decay_step)


def make_optimizer(net: nn.Module, opt: OptimizerSettings):
    """Adam optimizer plus a per-epoch step scheduler (or None)."""
    optimizer = torch.optim.Adam(
        net.parameters(), lr=opt.lr, weight_decay=opt.weight_decay
    )
    scheduler = None
    if opt.lr_decay_step is not None:
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=opt.lr_decay_step, gamma=opt.lr_decay_gamma
        )
    return optimizer, scheduler


def seed_everything(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; returns a numpy generator for batching."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


def iterate_minibatches(
    count: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """
    Shuffled index batches covering ``range(count)`` once.

    A trailing batch of a single index is merged into the batch before it:
    batch norm cannot train on one value per channel, which is what a lone
    slice gives at a 1x1 bottleneck.
    """
    order = rng.permutation(count)
    starts = list(range(0, count, batch_size))
    if batch_size > 1 and len(starts) > 1 and count - starts[-1] == 1:
        starts.pop()
    ends = starts[1:] + [count]
    for start, end in zip(starts, ends):
        yield order[start:end]


@contextlib.contextmanager
def evaluation_mode(net: nn.Module):
    """Run with batch norm in inference statistics and no gradients."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            yield net
    finally:
        net.train(was_training)


def pad_to_multiple(batch: torch.Tensor, multiple: int):
    """Reflect-pad H and W up to a multiple; returns the padded batch and crop size."""
    height, width = batch.shape[-2:]
    pad_h = (-height) % multiple
    pad_w = (-width) % multiple
    if pad_h == 0 and pad_w == 0:
        return batch, (height, width)
    mode = "reflect" if pad_h < height and pad_w < width else "replicate"
    padded = F.pad(batch, (0, pad_w, 0, pad_h), mode=mode)
    return padded, (height, width)


def predict(
    net: nn.Module,
    inputs: np.ndarray,
    batch_size: int = INFERENCE_BATCH_SIZE,
    device: str = "cpu",
) -> np.ndarray:
    """
    Batched inference on (B, C, H, W) inputs of any spatial size.

    Args:
        net: Network with a ``config.size_multiple`` attribute
        inputs: Input slices
        batch_size: Slices per forward pass
        device: Torch device

    Returns:
        Float32 network outputs cropped back to the input size
    """
    multiple = net.config.size_multiple
    if inputs.shape[0] == 0:
        return np.zeros((0, net.config.out_channels) + inputs.shape[2:], np.float32)
    outputs: List[np.ndarray] = []
    dtype = next(net.parameters()).dtype
    with evaluation_mode(net):
        for start in range(0, inputs.shape[0], batch_size):
            chunk = torch.as_tensor(inputs[start : start + batch_size], dtype=dtype)
            padded, (height, width) = pad_to_multiple(chunk.to(device), multiple)
            out = net(padded)[..., :height, :width]
            outputs.append(out.float().cpu().numpy())
    return np.concatenate(outputs, axis=0)


def to_tensor(array: np.ndarray, device: str = "cpu") -> torch.Tensor:
    return torch.as_tensor(
        np.ascontiguousarray(array), dtype=torch.float32, device=device
    )


def forward_padded(net: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Training-time forward pass for slices whose size is not a valid multiple."""
    padded, (height, width) = pad_to_multiple(batch, net.config.size_multiple)
    return net(padded)[..., :height, :width]


def augment_batch(rng: np.random.Generator, images: np.ndarray, *masks: np.ndarray):
    """
    Apply one drawn rotation/flip per sample, identically to image and masks.

    Args:
        rng: Generator drawing the transforms
        images: (B, H, W) slices
        masks: Any number of (B, H, W) label arrays

    Returns:
        Tuple of augmented arrays in argument order
    """
    out_images = np.empty_like(images)
    out_masks = [np.empty_like(m) for m in masks]
    for i in range(images.shape[0]):
        name = draw_augmentation(rng, images.shape[1:])
        out_images[i] = apply_augmentation(images[i], name)
        for source, target in zip(masks, out_masks):
            target[i] = apply_augmentation(source[i], name)
    return (out_images, *out_masks)
