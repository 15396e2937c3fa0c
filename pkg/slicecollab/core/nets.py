"""U-shaped 2D network shared by the segmentation and registration stages."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Union

import torch
from torch import nn

from slicecollab.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class SegNetConfig:
    """Architecture of the U-shaped network.

    Channel count doubles at every down-sampling step and halves on the way
    up; all convolutions are zero padded so spatial size is preserved.
    """

    in_channels: int = 1
    base_kernels: int = 16
    depth: int = 4
    out_channels: int = 2
    use_batch_norm: bool = True
    # Start registration heads at the identity transform
    zero_init_head: bool = False

    def __post_init__(self):
        if self.depth < 0 or self.base_kernels < 1:
            raise ConfigError("depth must be >= 0 and base_kernels >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def size_multiple(self) -> int:
        return 2**self.depth

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SegNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown network config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ConvBlock(nn.Module):
    """Two 3x3 zero-padded convolutions, each followed by batch norm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, batch_norm: bool = True):
        super().__init__()
        layers: List[nn.Module] = []
        for channels_in in (in_channels, out_channels):
            layers.append(
                nn.Conv2d(
                    channels_in,
                    out_channels,
                    kernel_size=3,
                    padding=1,
                    padding_mode="zeros",
                    bias=not batch_norm,
                )
            )
            if batch_norm:
                layers.append(nn.BatchNorm2d(out_channels))
            layers.append(nn.ReLU(inplace=True))
        self.conv = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a 1x1 output head."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        widths = [config.base_kernels * 2**level for level in range(config.depth + 1)]

        self.encoders = nn.ModuleList()
        channels = config.in_channels
        for width in widths:
            self.encoders.append(ConvBlock(channels, width, config.use_batch_norm))
            channels = width
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for width in reversed(widths[:-1]):
            self.upsamplers.append(
                nn.ConvTranspose2d(width * 2, width, kernel_size=2, stride=2)
            )
            self.decoders.append(ConvBlock(width * 2, width, config.use_batch_norm))

        self.head = nn.Conv2d(widths[0], config.out_channels, kernel_size=1)
        self._initialize_weights()

    def _initialize_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        if self.config.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                x = self.pool(x)
            x = encoder(x)
            skips.append(x)
        skips.pop()
        for upsample, decoder in zip(self.upsamplers, self.decoders):
            x = upsample(x)
            x = decoder(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


def build_segmentation_net(config: SegNetConfig = None) -> UNet:
    """Segmentation net: one input channel, two class logits."""
    config = config or SegNetConfig()
    fields = {**config.to_dict(), "in_channels": 1, "out_channels": 2}
    return UNet(SegNetConfig(**fields))


def build_registration_net(config: SegNetConfig = None) -> UNet:
    """Registration net: (moving, fixed) in, (dy, dx) out, zero-initialized head."""
    config = config or SegNetConfig()
    return UNet(
        SegNetConfig(
            **{
                **config.to_dict(),
                "in_channels": 2,
                "out_channels": 2,
                "zero_init_head": True,
            }
        )
    )


def count_parameters(config: SegNetConfig) -> int:
    """Number of trainable parameters of a :class:`UNet` built from ``config``."""
    with torch.random.fork_rng(devices=[]):
        net = UNet(config)
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def check_input(net: UNet, batch: torch.Tensor, channels: int) -> None:
    if batch.dim() != 4 or batch.shape[1] != channels:
        raise ShapeMismatchError(
            f"expected a (B, {channels}, H, W) batch, got {tuple(batch.shape)}"
        )
    multiple = net.config.size_multiple
    height, width = batch.shape[-2:]
    if height % multiple or width % multiple:
        raise ShapeMismatchError(
            f"spatial size {height}x{width} is not divisible by {multiple}; pad first"
        )


def forward_seg(net: UNet, batch: torch.Tensor) -> torch.Tensor:
    """
    Run the segmentation network.

    Args:
        net: Network built by :func:`build_segmentation_net`
        batch: (B, 1, H, W) images, H and W divisible by 2**depth

    Returns:
        (B, 2, H, W) class logits
    """
    check_input(net, batch, 1)
    return net(batch)


def forward_reg(net: UNet, pair: torch.Tensor) -> torch.Tensor:
    """
    Run the registration network.

    Args:
        net: Network built by :func:`build_registration_net`
        pair: (B, 2, H, W) with channel 0 the moving and channel 1 the fixed slice

    Returns:
        (B, 2, H, W) displacement field, (dy, dx) in pixels
    """
    check_input(net, pair, 2)
    return net(pair)


@dataclass
class Checkpoint:
    """Trained network weights plus the manifest describing how they were made."""

    net: UNet
    epoch: int = 0
    rng_seed: int = 0
    loss_history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def config(self) -> SegNetConfig:
        return self.net.config


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    """Write the state dict to ``path`` and the manifest to ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint.net.state_dict(), path)
    manifest = {
        "config": checkpoint.config.to_dict(),
        "epoch": checkpoint.epoch,
        "rng_seed": checkpoint.rng_seed,
        "loss_history": checkpoint.loss_history,
    }
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug(f"Saved checkpoint to {path}")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Rebuild a network and its manifest from :func:`save_checkpoint` output."""
    path = Path(path)
    with open(manifest_path(path), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    net = UNet(SegNetConfig.from_dict(manifest["config"]))
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    net.eval()
    return Checkpoint(
        net=net,
        epoch=int(manifest.get("epoch", 0)),
        rng_seed=int(manifest.get("rng_seed", 0)),
        loss_history=list(manifest.get("loss_history", [])),
    )
