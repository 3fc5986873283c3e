"""Baseline five-stage encoder-decoder U-Net generator.

Encoder stages are VGG-style double 3x3 conv blocks (BN + ReLU) followed by
2x2 max pooling, with filter counts 64/128/256/512 and a 512-wide bottleneck.
Each decoder stage upsamples with a 4x4 stride-2 transpose convolution,
concatenates the matching encoder feature map, and fuses with a 1x1
convolution before the next conv block. The head is a 64-wide conv block
(Conv9) and a 1x1 projection to C output channels (Conv10).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .archive import ArchiveError, WeightArchive
from .colorspace import ColorSpace, ImageBatch


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    in_channels: int = 3
    base_filters: int = 64
    stages: int = 5
    out_channels: int = 2
    use_pretrained_encoder: bool = False
    batchnorm_epsilon: float = 1e-5
    # "bounded" applies tanh (ab) or sigmoid (rgb) at Conv10; "linear" leaves
    # the head linear and hard-clips into the storage range.
    head_activation: str = "bounded"
    # When set, Conv10 outputs this many bins for a per-pixel softmax head
    # instead of direct color channels.
    distribution_bins: int | None = None

    def validate(self) -> None:
        if self.stages != 5:
            raise ConfigError(f"architecture is fixed at 5 stages, got {self.stages}")
        if self.in_channels != 3:
            raise ConfigError("encoder expects the grayscale replicated to 3 channels")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be positive, got {self.base_filters}")
        if self.distribution_bins is None and self.out_channels not in (2, 3):
            raise ConfigError(f"out_channels must be 2 (ab) or 3 (rgb), got {self.out_channels}")
        if self.distribution_bins is not None and self.distribution_bins < 2:
            raise ConfigError("distribution head needs at least 2 bins")
        if self.head_activation not in ("bounded", "linear"):
            raise ConfigError(f"unknown head_activation {self.head_activation!r}")

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_filters * (2**i) for i in range(4)]

    @property
    def output_space(self) -> ColorSpace:
        return ColorSpace.AB if self.out_channels == 2 else ColorSpace.RGB


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, c_in: int, c_out: int, bn_eps: float):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(c_out, eps=bn_eps, momentum=0.1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c_out, eps=bn_eps, momentum=0.1)

    def forward(self, x: Tensor) -> Tensor:
        x = torch.relu(self.bn1(self.conv1(x)))
        return torch.relu(self.bn2(self.conv2(x)))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_uniform_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        bf = cfg.base_filters
        w = cfg.encoder_widths  # [bf, 2bf, 4bf, 8bf]
        eps = cfg.batchnorm_epsilon

        self.enc1 = ConvBlock(cfg.in_channels, w[0], eps)
        self.enc2 = ConvBlock(w[0], w[1], eps)
        self.enc3 = ConvBlock(w[1], w[2], eps)
        self.enc4 = ConvBlock(w[2], w[3], eps)
        self.pool = nn.MaxPool2d(2)
        self.conv5 = ConvBlock(w[3], w[3], eps)

        # Transpose convs keep the channel width; 4x4 kernel, stride 2,
        # padding 1 doubles the spatial size exactly.
        self.up1 = nn.ConvTranspose2d(w[3], w[3], 4, stride=2, padding=1)
        self.fuse1 = nn.Conv2d(2 * w[3], w[3], 1)
        self.conv6 = ConvBlock(w[3], w[2], eps)
        self.up2 = nn.ConvTranspose2d(w[2], w[2], 4, stride=2, padding=1)
        self.fuse2 = nn.Conv2d(2 * w[2], w[2], 1)
        self.conv7 = ConvBlock(w[2], w[1], eps)
        self.up3 = nn.ConvTranspose2d(w[1], w[1], 4, stride=2, padding=1)
        self.fuse3 = nn.Conv2d(2 * w[1], w[1], 1)
        self.conv8 = ConvBlock(w[1], w[0], eps)
        self.up4 = nn.ConvTranspose2d(w[0], w[0], 4, stride=2, padding=1)
        self.fuse4 = nn.Conv2d(2 * w[0], w[0], 1)
        self.conv9 = ConvBlock(w[0], bf, eps)
        head_out = cfg.distribution_bins or cfg.out_channels
        self.conv10 = nn.Conv2d(bf, head_out, 1)

        self.apply(_init_weights)

    @property
    def encoder_blocks(self) -> dict[str, ConvBlock]:
        return {
            "conv1": self.enc1,
            "conv2": self.enc2,
            "conv3": self.enc3,
            "conv4": self.enc4,
            "conv5": self.conv5,
        }

    def _backbone(self, x: Tensor, shapes: dict[str, tuple[int, ...]] | None = None) -> Tensor:
        def record(name: str, t: Tensor) -> Tensor:
            if shapes is not None:
                shapes[name] = tuple(t.shape[1:])
            return t

        s1 = self.enc1(x)
        p1 = record("conv1_pool", self.pool(s1))
        s2 = self.enc2(p1)
        p2 = record("conv2_pool", self.pool(s2))
        s3 = self.enc3(p2)
        p3 = record("conv3_pool", self.pool(s3))
        s4 = self.enc4(p3)
        p4 = record("conv4_pool", self.pool(s4))

        d = record("conv5_up", self.up1(self.conv5(p4)))
        d = self.fuse1(torch.cat([d, s4], dim=1))
        d = record("conv6_up", self.up2(self.conv6(d)))
        d = self.fuse2(torch.cat([d, s3], dim=1))
        d = record("conv7_up", self.up3(self.conv7(d)))
        d = self.fuse3(torch.cat([d, s2], dim=1))
        d = record("conv8_up", self.up4(self.conv8(d)))
        d = self.fuse4(torch.cat([d, s1], dim=1))
        d = record("conv9", self.conv9(d))
        return record("conv10", self.conv10(d))

    def forward(self, gray3: ImageBatch, shapes: dict | None = None) -> ImageBatch:
        """Predict colors for a replicated-grayscale batch.

        ``shapes``, when given, is filled with the per-stage output shapes
        (C, H, W) so architecture conformance can be asserted.
        """
        if self.cfg.distribution_bins is not None:
            raise ConfigError("distribution-head models predict via predict_distribution()")
        x = gray3.require_space(ColorSpace.RGB)
        self._check_divisible(x)
        out = self._backbone(x, shapes)
        space = self.cfg.output_space
        if self.cfg.head_activation == "bounded":
            out = torch.tanh(out) if space is ColorSpace.AB else torch.sigmoid(out)
        elif space is ColorSpace.AB:
            out = out.clamp(-1.0, 1.0)
        else:
            out = out.clamp(0.0, 1.0)
        return ImageBatch(out, space)

    def predict_distribution(self, gray3: ImageBatch) -> Tensor:
        """Per-pixel bin probabilities (B x K x H x W) from the softmax head."""
        if self.cfg.distribution_bins is None:
            raise ConfigError("model was not built with a distribution head")
        x = gray3.require_space(ColorSpace.RGB)
        self._check_divisible(x)
        return torch.softmax(self._backbone(x), dim=1)

    @staticmethod
    def _check_divisible(x: Tensor) -> None:
        _, _, h, w = x.shape
        if h % 16 or w % 16:
            raise ConfigError(f"input H and W must be divisible by 16, got {h}x{w}")


def build(cfg: NetworkConfig) -> Generator:
    return Generator(cfg)


# Canonical archive keys for the ten encoder convolutions.
ENCODER_ARCHIVE_KEYS = [f"conv{s}_{i}" for s in range(1, 6) for i in (1, 2)]

# First two convolutions of each block in the torchvision 16-layer VGG
# ``features`` index layout (conv-only variant, no batch norm).
_VGG16_FEATURE_INDICES = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12,
    "conv4_1": 17, "conv4_2": 19,
    "conv5_1": 24, "conv5_2": 26,
}


def vgg16_features_to_archive(state_dict: dict[str, Tensor]) -> WeightArchive:
    """Repack a torchvision VGG16 ``features`` state dict as a WeightArchive."""
    archive = WeightArchive()
    for key, idx in _VGG16_FEATURE_INDICES.items():
        for part in ("weight", "bias"):
            src = f"features.{idx}.{part}"
            if src not in state_dict:
                raise ArchiveError(f"state dict is missing {src!r} (needed for {key})")
            archive.put(f"{key}.{part}", state_dict[src])
    return archive


def load_pretrained_encoder(g: Generator, weights: WeightArchive) -> Generator:
    """Copy archived classifier conv weights into the encoder, in place.

    All ten encoder convolutions (conv1_1 .. conv5_2) must be present with
    matching shapes; the decoder is untouched. Returns the same generator.
    """
    with torch.no_grad():
        for name, block in g.encoder_blocks.items():
            for conv_idx, conv in enumerate((block.conv1, block.conv2), start=1):
                key = f"{name}_{conv_idx}"
                conv.weight.copy_(weights.get(f"{key}.weight", tuple(conv.weight.shape)))
                conv.bias.copy_(weights.get(f"{key}.bias", tuple(conv.bias.shape)))
    return g
