"""Segmentation losses and the dynamic pseudo-label weight.

All losses take per-pixel foreground probabilities and binary targets of the
same shape. A leading batch dimension is optional; with ``per_image`` the
Dice term is computed per image and averaged.
"""

from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional

import torch

from slicecollab.errors import ConfigError, ShapeMismatchError

CE_EPSILON = 1e-7


@dataclass
class SemiLossConfig:
    """Weights of the semi-supervised objective and the pseudo-label ramp."""

    gamma: float = 1.0
    sigma: float = 1.0
    alpha_f: float = 3.0
    K1: int = 50
    K2: int = 100
    dice_per_image: bool = True

    def __post_init__(self):
        if self.K1 >= self.K2:
            raise ConfigError(f"K1 ({self.K1}) must be smaller than K2 ({self.K2})")
        if self.alpha_f <= 0 or self.sigma <= 0 or self.gamma < 0:
            raise ConfigError("alpha_f and sigma must be positive, gamma non-negative")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SemiLossConfig":
        return _from_dict(cls, data, "semi_loss")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TargetLossConfig:
    """Weights of the certain / uncertain target-network objective."""

    gamma_certain: float = 1.0
    gamma_uncertain: float = 0.1
    beta: float = 0.5
    sigma: float = 1.0
    dice_per_image: bool = True

    def __post_init__(self):
        if min(self.gamma_certain, self.gamma_uncertain, self.beta) < 0:
            raise ConfigError("gamma_certain, gamma_uncertain and beta must be >= 0")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TargetLossConfig":
        return _from_dict(cls, data, "target_loss")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _from_dict(cls, data: Dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown {section} config keys: {sorted(unknown)}")
    return cls(**data)


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction shape {tuple(pred.shape)} "
            f"!= target shape {tuple(target.shape)}"
        )


def dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    sigma: float = 1.0,
    per_image: bool = True,
) -> torch.Tensor:
    """
    Smoothed Dice loss ``1 - (2*sum(p*t) + sigma) / (sum(p) + sum(t) + sigma)``.

    Args:
        pred: Foreground probabilities, (H, W) or (B, H, W)
        target: Binary target of the same shape
        sigma: Smoothing constant
        per_image: Average per-image losses instead of pooling the batch

    Returns:
        Scalar loss in [0, 1)
    """
    _check_shapes(pred, target)
    target = target.to(pred.dtype)
    if per_image and pred.dim() >= 3:
        dims = tuple(range(1, pred.dim()))
        intersection = (pred * target).sum(dim=dims)
        total = pred.sum(dim=dims) + target.sum(dim=dims)
        return (1.0 - (2.0 * intersection + sigma) / (total + sigma)).mean()
    intersection = (pred * target).sum()
    total = pred.sum() + target.sum()
    return 1.0 - (2.0 * intersection + sigma) / (total + sigma)


def ce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    _check_shapes(pred, target)
    target = target.to(pred.dtype)
    p = pred.clamp(CE_EPSILON, 1.0 - CE_EPSILON)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dice_ce_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    gamma: float,
    sigma: float = 1.0,
    per_image: bool = True,
) -> torch.Tensor:
    """``dice + gamma * ce``."""
    return dice_loss(pred, target, sigma, per_image) + gamma * ce_loss(pred, target)


def alpha_schedule(t: int, cfg: SemiLossConfig) -> float:
    """Piecewise-linear ramp: 0 before K1, linear to alpha_f at K2, flat after."""
    if t < 0:
        raise ValueError(f"epoch must be non-negative, got {t}")
    if t < cfg.K1:
        return 0.0
    if t >= cfg.K2:
        return float(cfg.alpha_f)
    return cfg.alpha_f * (t - cfg.K1) / (cfg.K2 - cfg.K1)


def _is_empty(tensor: Optional[torch.Tensor]) -> bool:
    return tensor is None or tensor.numel() == 0


def semi_loss(
    pred_lab: Optional[torch.Tensor],
    y_lab: Optional[torch.Tensor],
    pred_unlab: Optional[torch.Tensor],
    y_pseudo: Optional[torch.Tensor],
    t: int,
    cfg: SemiLossConfig,
) -> torch.Tensor:
    """
    Labeled Dice+CE plus the alpha(t)-weighted pseudo-labeled Dice+CE.

    Args:
        pred_lab: Predictions on labeled slices (may be empty or None)
        y_lab: Manual labels of those slices
        pred_unlab: Predictions on unlabeled slices (may be empty or None)
        y_pseudo: Pseudo labels of those slices
        t: Current epoch
        cfg: Loss weights and ramp constants

    Returns:
        Scalar loss; an empty term contributes zero

    Raises:
        ValueError: If both batches are empty
    """
    labeled_empty = _is_empty(pred_lab)
    unlabeled_empty = _is_empty(pred_unlab)
    if labeled_empty and unlabeled_empty:
        raise ValueError("semi_loss needs a labeled or an unlabeled batch")

    reference = pred_unlab if labeled_empty else pred_lab
    total = reference.new_zeros(())
    if not labeled_empty:
        total = total + dice_ce_loss(
            pred_lab, y_lab, cfg.gamma, cfg.sigma, cfg.dice_per_image
        )
    alpha = alpha_schedule(t, cfg)
    if alpha > 0 and not unlabeled_empty:
        total = total + alpha * dice_ce_loss(
            pred_unlab, y_pseudo, cfg.gamma, cfg.sigma, cfg.dice_per_image
        )
    return total


def target_loss_terms(
    pred_all: torch.Tensor,
    y_certain: torch.Tensor,
    central: torch.Tensor,
    y_uncertain: Optional[torch.Tensor],
    cfg: TargetLossConfig,
):
    """
    Certain and uncertain terms of the target objective, separately.

    Args:
        pred_all: (B, H, W) foreground probabilities
        y_certain: (B, H, W) manual labels on central slices, consistent
            pseudo labels elsewhere
        central: (B,) boolean, True for central (manually labeled) slices
        y_uncertain: (B, H, W) inconsistent pseudo labels, or None when no
            uncertain supervision exists; only non-central entries are used
        cfg: Loss weights

    Returns:
        Tuple (certain, uncertain) of scalar tensors

    Raises:
        ValueError: If uncertain labels are supplied for a central slice
    """
    _check_shapes(pred_all, y_certain)
    central = torch.as_tensor(central, dtype=torch.bool, device=pred_all.device)
    if central.shape != pred_all.shape[:1]:
        raise ShapeMismatchError(
            f"central flags {tuple(central.shape)} "
            f"do not match batch {pred_all.shape[0]}"
        )

    certain = dice_ce_loss(
        pred_all, y_certain, cfg.gamma_certain, cfg.sigma, cfg.dice_per_image
    )
    uncertain = pred_all.new_zeros(())
    if y_uncertain is None:
        return certain, uncertain

    _check_shapes(pred_all, y_uncertain)
    if central.any() and bool((y_uncertain[central] != 0).any()):
        raise ValueError("uncertain labels supplied for a central slice")
    non_central = ~central
    if non_central.any():
        uncertain = dice_ce_loss(
            pred_all[non_central],
            y_uncertain[non_central],
            cfg.gamma_uncertain,
            cfg.sigma,
            cfg.dice_per_image,
        )
    return certain, uncertain


def target_loss(
    pred_all: torch.Tensor,
    y_certain: torch.Tensor,
    central: torch.Tensor,
    y_uncertain: Optional[torch.Tensor],
    cfg: TargetLossConfig,
) -> torch.Tensor:
    """``certain + beta * uncertain``; see :func:`target_loss_terms`."""
    certain, uncertain = target_loss_terms(
        pred_all, y_certain, central, y_uncertain, cfg
    )
    return certain + cfg.beta * uncertain
