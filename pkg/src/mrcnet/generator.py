"""MRC-Net generator: multi-resolution encoder, bidirectional ConvLSTM skip fusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FusionError, NumericError

BN_MOMENTUM = 0.1  # torch convention; equals a running-average decay of 0.9


@dataclass
class GeneratorConfig:
    input_size: int = 640
    input_channels: int = 3
    stem_channels: int = 16
    mr_block_channels: tuple[int, int] = (32, 64)
    bottleneck_channels: int = 160
    # indexed by encoder level: (full resolution, half resolution)
    lstm_hidden_channels: tuple[int, int] = (16, 32)
    use_multires: bool = True
    use_biconvlstm: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.mr_block_channels = tuple(int(c) for c in self.mr_block_channels)
        self.lstm_hidden_channels = tuple(int(c) for c in self.lstm_hidden_channels)
        self.validate()

    def validate(self) -> None:
        if self.input_size <= 0 or self.input_size % 4:
            raise ConfigError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        if len(self.mr_block_channels) != 2 or len(self.lstm_hidden_channels) != 2:
            raise ConfigError("mr_block_channels and lstm_hidden_channels need exactly two entries")
        counts = [self.input_channels, self.stem_channels, self.bottleneck_channels,
                  *self.mr_block_channels, *self.lstm_hidden_channels]
        if any(c < 1 for c in counts):
            raise ConfigError(f"all channel counts must be >= 1, got {counts}")

    def to_dict(self) -> dict:
        return asdict(self)

    def scaled(self, factor: int) -> "GeneratorConfig":
        """Copy with every channel width multiplied by ``factor`` (input channels untouched)."""
        d = self.to_dict()
        d["stem_channels"] *= factor
        d["bottleneck_channels"] *= factor
        d["mr_block_channels"] = tuple(c * factor for c in self.mr_block_channels)
        d["lstm_hidden_channels"] = tuple(c * factor for c in self.lstm_hidden_channels)
        return GeneratorConfig(**d)


def conv_bn_relu(in_ch: int, out_ch: int, kernel_size: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2),
        nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=False),
    )


class MultiResBlock(nn.Module):
    """Three receptive fields (3x3, 5x5, 7x7) from a cascade of 3x3 convolutions.

    The 5x5 branch is a 3x3 conv applied to the 3x3 branch output and the 7x7
    branch one more 3x3 on top of that, so the small-field weights are shared by
    the larger fields. Branches are concatenated, projected with a 1x1 conv and
    added to a 1x1 shortcut of the input.

    With ``use_multires=False`` the block collapses to a single conv-BN-ReLU.
    """

    def __init__(self, in_channels: int, out_channels: int, use_multires: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.use_multires = use_multires
        if use_multires:
            self.branch3 = conv_bn_relu(in_channels, out_channels)
            self.branch5 = conv_bn_relu(out_channels, out_channels)
            self.branch7 = conv_bn_relu(out_channels, out_channels)
            self.project = nn.Sequential(
                nn.Conv2d(3 * out_channels, out_channels, 1),
                nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            )
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1),
                nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            )
        else:
            self.single = conv_bn_relu(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"MR block expects {self.in_channels} channels, got {x.shape[1]}")
        if not self.use_multires:
            return self.single(x)
        b3 = self.branch3(x)
        b5 = self.branch5(b3)
        b7 = self.branch7(b5)
        merged = self.project(torch.cat([b3, b5, b7], dim=1))
        return F.relu(merged + self.shortcut(x))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell; gate order is input, forget, output, candidate."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        # Split input/hidden convolutions: identical to one conv over [x, h] with a
        # single bias, but lets the zero initial state skip the hidden branch.
        self.conv_x = nn.Conv2d(in_channels, 4 * hidden_channels, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(hidden_channels, 4 * hidden_channels, kernel_size, padding=pad, bias=False)

    def forward(self, x, state=None):
        gates = self.conv_x(x)
        if state is None:
            i, f, o, g = gates.chunk(4, dim=1)
            c = torch.sigmoid(i) * torch.tanh(g)
        else:
            h, c = state
            i, f, o, g = (gates + self.conv_h(h)).chunk(4, dim=1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def run(self, sequence: Sequence[torch.Tensor]) -> torch.Tensor:
        state = None
        for x in sequence:
            state = self(x, state)
        return state[0]


class BiConvLSTMFusion(nn.Module):
    """Fuse an encoder skip feature with a decoder feature.

    The pair is treated as the sequence (encoder, decoder); one ConvLSTM reads it
    forward, another backward, and the two final hidden states are concatenated
    and projected by a 3x3 conv-BN-ReLU.
    """

    def __init__(self, channels: int, hidden_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or channels
        self.forward_cell = ConvLSTMCell(channels, hidden_channels)
        self.backward_cell = ConvLSTMCell(channels, hidden_channels)
        self.project = conv_bn_relu(2 * hidden_channels, out_channels)

    def forward(self, enc_feat: torch.Tensor, dec_feat: torch.Tensor) -> torch.Tensor:
        check_fusion_pair(enc_feat, dec_feat)
        h_fwd = self.forward_cell.run([enc_feat, dec_feat])
        h_bwd = self.backward_cell.run([dec_feat, enc_feat])
        return self.project(torch.cat([h_fwd, h_bwd], dim=1))


class ConcatFusion(nn.Module):
    """Ablation fallback: channel concatenation followed by a 3x3 conv."""

    def __init__(self, channels: int, out_channels: int | None = None):
        super().__init__()
        self.project = conv_bn_relu(2 * channels, out_channels or channels)

    def forward(self, enc_feat, dec_feat):
        check_fusion_pair(enc_feat, dec_feat)
        return self.project(torch.cat([enc_feat, dec_feat], dim=1))


def check_fusion_pair(enc_feat: torch.Tensor, dec_feat: torch.Tensor) -> None:
    if enc_feat.shape[-2:] != dec_feat.shape[-2:]:
        raise FusionError(
            f"encoder {tuple(enc_feat.shape[-2:])} and decoder {tuple(dec_feat.shape[-2:])} "
            "spatial dims differ"
        )
    if enc_feat.shape[1] != dec_feat.shape[1]:
        raise FusionError(f"channel mismatch: encoder {enc_feat.shape[1]}, decoder {dec_feat.shape[1]}")


class Generator(nn.Module):
    """Shallow encoder-decoder with two MR blocks and two 2x2 max-pool stages."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        c1, c2 = config.mr_block_channels
        h1, h2 = config.lstm_hidden_channels
        cb = config.bottleneck_channels

        self.stem = conv_bn_relu(config.input_channels, config.stem_channels)
        self.mr1 = MultiResBlock(config.stem_channels, c1, config.use_multires)
        self.pool1 = nn.MaxPool2d(2)
        self.mr2 = MultiResBlock(c1, c2, config.use_multires)
        self.pool2 = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(conv_bn_relu(c2, cb), conv_bn_relu(cb, cb))

        self.up2 = nn.ConvTranspose2d(cb, c2, 2, stride=2)
        self.fuse2 = BiConvLSTMFusion(c2, h2) if config.use_biconvlstm else ConcatFusion(c2)
        self.dec2 = conv_bn_relu(c2, c2)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.fuse1 = BiConvLSTMFusion(c1, h1) if config.use_biconvlstm else ConcatFusion(c1)
        self.dec1 = conv_bn_relu(c1, c1)
        self.head = nn.Conv2d(c1, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ConfigError(f"expected N x {self.config.input_channels} x H x W input, got {tuple(x.shape)}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ConfigError(f"spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        f1 = self.mr1(self.stem(x))
        f2 = self.mr2(self.pool1(f1))
        b = self.bottleneck(self.pool2(f2))
        d2 = self.dec2(self.fuse2(f2, self.up2(b)))
        d1 = self.dec1(self.fuse1(f1, self.up1(d2)))
        return torch.sigmoid(self.head(d1))

    @property
    def mr_blocks(self) -> list[MultiResBlock]:
        return [m for m in self.modules() if isinstance(m, MultiResBlock)]

    @property
    def pooling_layers(self) -> list[nn.Module]:
        return [m for m in self.modules() if isinstance(m, (nn.MaxPool2d, nn.AvgPool2d))]


def fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        # each output pixel of a stride==kernel transposed conv sees one input pixel
        kh, kw = module.kernel_size
        sh, sw = module.stride
        return max(1, w.shape[0] * kh * kw // (sh * sw))
    return int(np.prod(w.shape[1:]))


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int) -> nn.Module:
    """He-normal conv/linear weights, zero biases, unit BN scales, fresh running stats."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            std = math.sqrt(2.0 / fan_in(m))
            m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64) * std)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
    return model


def init_parameters(config: GeneratorConfig, seed: int | None = None) -> Generator:
    model = Generator(config)
    return reset_parameters(model, config.seed if seed is None else seed)


def count_parameters(config_or_model: GeneratorConfig | nn.Module) -> int:
    """Exact number of trainable scalars (BN running statistics excluded)."""
    if isinstance(config_or_model, nn.Module):
        model = config_or_model
    else:
        with torch.device("meta"):
            model = Generator(config_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def mr_block_forward(x: torch.Tensor, block: MultiResBlock) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError("non-finite values in MR block input")
    return block(x)


def biconvlstm_fuse(enc_feat: torch.Tensor, dec_feat: torch.Tensor, fusion: nn.Module) -> torch.Tensor:
    return fusion(enc_feat, dec_feat)


@torch.no_grad()
def predict(model: Generator, image: np.ndarray) -> np.ndarray:
    """Run a normalized H x W x 3 image through the generator in eval mode; returns H x W."""
    was_training = model.training
    model.eval()
    try:
        p = next(model.parameters())
        x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=p.dtype, device=p.device)
        return model(x[None])[0, 0].cpu().numpy().astype(np.float64)
    finally:
        model.train(was_training)


__all__ = [
    "GeneratorConfig", "Generator", "MultiResBlock", "ConvLSTMCell", "BiConvLSTMFusion",
    "ConcatFusion", "init_parameters", "reset_parameters", "count_parameters",
    "mr_block_forward", "biconvlstm_fuse", "predict",
]
