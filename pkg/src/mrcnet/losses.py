"""Segmentation and adversarial objectives.

All functions take torch tensors and return scalar tensors so they can be
back-propagated. Dice and Jaccard are the soft (probabilistic) versions; the
hard set-based counterparts live in :mod:`mrcnet.metrics`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError

SEG_VARIANTS = ("bce", "bce_dice", "bce_dice_jaccard", "dice_only", "iou_only")


@dataclass
class LossConfig:
    beta: float = 10.0
    gamma: float = 0.5
    seg_variant: str = "bce_dice"
    smooth_eps: float = 1e-6

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not (self.beta == self.beta and abs(self.beta) != float("inf")) or self.beta < 0:
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.smooth_eps > 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")
        if self.seg_variant not in SEG_VARIANTS:
            raise ConfigError(f"unknown seg_variant {self.seg_variant!r}; expected one of {SEG_VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ConfigError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")


def _clamp(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    _check_shapes(pred, target)
    p = _clamp(pred, eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def soft_overlap(pred: torch.Tensor, target: torch.Tensor):
    """Soft intersection and the two set sizes: sum(p*y), sum(p), sum(y)."""
    _check_shapes(pred, target)
    return (pred * target).sum(), pred.sum(), target.sum()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    inter, sp, st = soft_overlap(pred, target)
    return 1.0 - (2.0 * inter + eps) / (sp + st + eps)


def jaccard_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    inter, sp, st = soft_overlap(pred, target)
    return 1.0 - (inter + eps) / (sp + st - inter + eps)


def seg_loss(pred: torch.Tensor, target: torch.Tensor, config: LossConfig | None = None) -> torch.Tensor:
    config = config or LossConfig()
    eps = config.smooth_eps
    v = config.seg_variant
    if v == "bce":
        return bce_loss(pred, target, eps)
    if v == "dice_only":
        return dice_loss(pred, target, eps)
    if v == "iou_only":
        return jaccard_loss(pred, target, eps)
    if v in ("bce_dice", "bce_dice_jaccard"):
        loss = config.gamma * bce_loss(pred, target, eps) + (1 - config.gamma) * dice_loss(pred, target, eps)
        if v == "bce_dice_jaccard":
            loss = loss + jaccard_loss(pred, target, eps)
        return loss
    raise ConfigError(f"unknown seg_variant {v!r}")


def gan_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """-log D(f, y) - log(1 - D(f, G(f))), averaged over the batch."""
    d_real = torch.as_tensor(d_real)
    d_fake = torch.as_tensor(d_fake)
    return (-torch.log(_clamp(d_real, eps)) - torch.log1p(-_clamp(d_fake, eps))).mean()


def gan_generator_loss(d_fake: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    # non-saturating surrogate for log(1 - D(f, G(f)))
    return (-torch.log(_clamp(torch.as_tensor(d_fake), eps))).mean()


def composite_generator_loss(d_fake, pred, target, config: LossConfig | None = None) -> torch.Tensor:
    config = config or LossConfig()
    adv = gan_generator_loss(d_fake, config.smooth_eps)
    if config.beta == 0:
        return adv
    return adv + config.beta * seg_loss(pred, target, config)
