"""Conditional discriminator D(image, vessel map) -> probability the map is human-annotated."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, PairingError
from .generator import BN_MOMENTUM, reset_parameters

OUTPUT_MARGIN = 1e-6
DOWNSAMPLE_METHODS = ("max_pool", "strided_conv")


@dataclass
class DiscriminatorConfig:
    input_size: int = 640
    conv_channels: tuple[int, ...] = (16, 16, 32, 32, 64, 64, 128, 128, 128)
    # (1-based stage index, method); the stage's output is halved in both dims
    downsample_schedule: tuple[tuple[int, str], ...] = (
        (2, "max_pool"), (4, "strided_conv"), (6, "max_pool"), (8, "strided_conv"),
    )
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.downsample_schedule = tuple((int(i), str(m)) for i, m in self.downsample_schedule)
        self.validate()

    def validate(self) -> None:
        if len(self.conv_channels) != 9:
            raise ConfigError(f"discriminator needs exactly nine conv stages, got {len(self.conv_channels)}")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError("discriminator channel counts must be >= 1")
        seen = set()
        for idx, method in self.downsample_schedule:
            if not 1 <= idx <= 9 or idx in seen:
                raise ConfigError(f"bad downsample stage index {idx}")
            if method not in DOWNSAMPLE_METHODS:
                raise ConfigError(f"unknown downsample method {method!r}")
            seen.add(idx)
        if self.input_size >> len(self.downsample_schedule) < 1:
            raise ConfigError(f"input_size {self.input_size} too small for {len(seen)} downsamplings")

    def to_dict(self) -> dict:
        return asdict(self)


class DiscriminatorStage(nn.Module):
    """One conv + BN + LeakyReLU stage, optionally halving resolution.

    A ``strided_conv`` stage uses a 2x2 stride-2 kernel in place of its 3x3 conv,
    so the stage count stays at nine either way.
    """

    def __init__(self, in_ch: int, out_ch: int, downsample: str | None, slope: float):
        super().__init__()
        if downsample == "strided_conv":
            self.conv = nn.Conv2d(in_ch, out_ch, 2, stride=2)
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM)
        self.act = nn.LeakyReLU(slope)
        self.pool = nn.MaxPool2d(2) if downsample == "max_pool" else nn.Identity()

    def forward(self, x):
        return self.pool(self.act(self.norm(self.conv(x))))


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None, in_channels: int = 4):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()
        schedule = dict(config.downsample_schedule)
        stages = []
        prev = in_channels
        for i, ch in enumerate(config.conv_channels, start=1):
            stages.append(DiscriminatorStage(prev, ch, schedule.get(i), config.leaky_slope))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.dense = nn.Linear(prev, 1)

    def logits(self, image: torch.Tensor, vessel_map: torch.Tensor) -> torch.Tensor:
        if image.shape[-2:] != vessel_map.shape[-2:] or image.shape[0] != vessel_map.shape[0]:
            raise PairingError(
                f"image {tuple(image.shape)} and vessel map {tuple(vessel_map.shape)} do not pair"
            )
        feats = self.stages(torch.cat([image, vessel_map], dim=1))
        return self.dense(feats.mean(dim=(2, 3)))[:, 0]

    def forward(self, image: torch.Tensor, vessel_map: torch.Tensor) -> torch.Tensor:
        """Probability per pair, kept strictly inside (0, 1) by an affine squash."""
        p = torch.sigmoid(self.logits(image, vessel_map))
        return 0.5 + (1.0 - 2.0 * OUTPUT_MARGIN) * (p - 0.5)

    @property
    def conv_layers(self) -> list[nn.Conv2d]:
        return [m for m in self.modules() if isinstance(m, nn.Conv2d)]


def init_discriminator(config: DiscriminatorConfig, seed: int | None = None) -> Discriminator:
    return reset_parameters(Discriminator(config), config.seed if seed is None else seed)


def discriminator_forward(image: torch.Tensor, vessel_map: torch.Tensor, model: Discriminator) -> torch.Tensor:
    return model(image, vessel_map)
