"""Error-based and perceptual training objectives.

All losses return a 0-dim tensor so they can be backpropagated directly.
Reductions are means (per element, or per pixel for the l2-coupled MAE), so
magnitudes are resolution independent and learning rates transfer across
image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .archive import WeightArchive
from .colorspace import ColorSpace, ImageBatch

_NORM_EPS = 1e-10


class LossInputError(ValueError):
    pass


def _pair(u, v) -> tuple[Tensor, Tensor]:
    """Unwrap ImageBatch pairs, enforcing matching space and shape."""
    if isinstance(u, ImageBatch) and isinstance(v, ImageBatch):
        if u.space is not v.space:
            raise LossInputError(f"space mismatch: {u.space.name} vs {v.space.name}")
        u, v = u.values, v.values
    elif isinstance(u, ImageBatch) or isinstance(v, ImageBatch):
        raise LossInputError("compare two ImageBatches or two raw tensors, not a mix")
    if u.shape != v.shape:
        raise LossInputError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return u, v


def mse_loss(u, v) -> Tensor:
    u, v = _pair(u, v)
    return ((u - v) ** 2).mean()


def mae_loss(u, v, coupling: str = "l1") -> Tensor:
    """Mean absolute error; ``l2`` coupling takes the per-pixel Euclidean
    norm across channels before averaging over pixels."""
    u, v = _pair(u, v)
    if coupling == "l1":
        return (u - v).abs().mean()
    if coupling == "l2":
        # vector_norm has a well-defined (zero) subgradient at the origin
        return torch.linalg.vector_norm(u - v, dim=1).mean()
    raise LossInputError(f"coupling must be 'l1' or 'l2', got {coupling!r}")


def huber_loss(u, v, delta: float = 1.0) -> Tensor:
    if delta <= 0:
        raise LossInputError(f"delta must be positive, got {delta}")
    u, v = _pair(u, v)
    g = (u - v).abs()
    quad = 0.5 * g * g
    lin = delta * (g - 0.5 * delta)
    return torch.where(g <= delta, quad, lin).mean()


# ---------------------------------------------------------------------------
# Feature extractors


class FeatureExtractor(nn.Module):
    """Frozen network exposing named feature taps for RGB inputs in [0,1].

    Subclasses set ``layer_taps`` (ordered tap names) and ``mean``/``std``
    preprocessing buffers, and implement ``_features``. Weights never train.
    """

    layer_taps: tuple[str, ...] = ()

    def __init__(self, mean=(0.0,), std=(1.0,)):
        # Length-1 defaults broadcast over any channel count.
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def forward(self, rgb: Tensor) -> dict[str, Tensor]:
        return self._features((rgb - self.mean) / self.std)

    def _features(self, x: Tensor) -> dict[str, Tensor]:
        raise NotImplementedError


class IdentityFeatureExtractor(FeatureExtractor):
    """Single tap returning the input unchanged; useful as a stand-in."""

    layer_taps = ("identity",)

    def _features(self, x: Tensor) -> dict[str, Tensor]:
        return {"identity": x}


class ToyFeatureExtractor(FeatureExtractor):
    """Small deterministic conv stack with smooth activations for tests."""

    layer_taps = ("toy1", "toy2")

    def __init__(self, in_channels: int = 3, widths: tuple[int, int] = (4, 8), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1)
        for conv in (self.conv1, self.conv2):
            nn.init.trunc_normal_(conv.weight, std=0.4, generator=gen)
            nn.init.trunc_normal_(conv.bias, std=0.1, generator=gen)
        self.freeze()

    def _features(self, x: Tensor) -> dict[str, Tensor]:
        f1 = torch.tanh(self.conv1(x))
        f2 = torch.tanh(self.conv2(f1))
        return {"toy1": f1, "toy2": f2}


# 16-layer VGG conv plan: (block, convs-in-block, width); taps follow the
# last ReLU of each block.
_VGG16_PLAN = [(1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512), (5, 3, 512)]
VGG_TAPS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class VggFeatureExtractor(FeatureExtractor):
    """VGG16-style conv tower tapped after each block's final activation.

    Weights come from a WeightArchive with ``conv{b}_{i}.{weight,bias}``
    entries; without an archive a fixed-seed random initialization is used
    (deterministic, but not a perceptual metric anyone calibrated).
    """

    layer_taps = VGG_TAPS

    def __init__(self, weights: WeightArchive | None = None, seed: int = 0):
        super().__init__(mean=IMAGENET_MEAN, std=IMAGENET_STD)
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList()
        c_in = 3
        for _, n_convs, width in _VGG16_PLAN:
            block = nn.ModuleList()
            for _ in range(n_convs):
                conv = nn.Conv2d(c_in, width, 3, padding=1)
                nn.init.kaiming_uniform_(conv.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                nn.init.zeros_(conv.bias)
                block.append(conv)
                c_in = width
            self.blocks.append(block)
        if weights is not None:
            self._load(weights)
        self.freeze()

    def _load(self, weights: WeightArchive) -> None:
        with torch.no_grad():
            for (b, n_convs, _), block in zip(_VGG16_PLAN, self.blocks):
                for i, conv in enumerate(block, start=1):
                    key = f"conv{b}_{i}"
                    conv.weight.copy_(weights.get(f"{key}.weight", tuple(conv.weight.shape)))
                    conv.bias.copy_(weights.get(f"{key}.bias", tuple(conv.bias.shape)))

    def _features(self, x: Tensor) -> dict[str, Tensor]:
        feats = {}
        for tap, block in zip(self.layer_taps, self.blocks):
            for conv in block:
                x = torch.relu(conv(x))
            feats[tap] = x
            x = torch.max_pool2d(x, 2)
        return feats


def _extract_pair(u, v, extractor: FeatureExtractor) -> tuple[dict, dict]:
    if isinstance(u, ImageBatch):
        u = u.require_space(ColorSpace.RGB)
    if isinstance(v, ImageBatch):
        v = v.require_space(ColorSpace.RGB)
    if u.shape != v.shape:
        raise LossInputError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return extractor(u), extractor(v)


def feature_loss(u, v, extractor: FeatureExtractor, layer: str) -> Tensor:
    """Feature reconstruction distance at one tap: per-image squared error
    normalized by C*W*H, averaged over the batch."""
    if layer not in extractor.layer_taps:
        raise LossInputError(f"extractor has no tap {layer!r}; taps: {extractor.layer_taps}")
    fu, fv = _extract_pair(u, v, extractor)
    d = fu[layer] - fv[layer]
    per_image = (d * d).flatten(1).sum(dim=1) / d[0].numel()
    return per_image.mean()


@dataclass
class LpipsConfig:
    """Tap selection and per-channel weights for the perceptual distance.

    ``weights`` maps tap name -> nonnegative weight vector of length C_l;
    missing taps default to all-ones. Features are always unit-normalized
    along the channel dimension before weighting.
    """

    taps: tuple[str, ...] = VGG_TAPS
    weights: dict[str, Tensor] = field(default_factory=dict)
    normalize_features: bool = True

    def __post_init__(self):
        if not self.normalize_features:
            raise LossInputError("channel normalization is part of the metric definition")

    @classmethod
    def uniform(cls, taps: tuple[str, ...]) -> "LpipsConfig":
        return cls(taps=taps)

    @classmethod
    def from_archive(cls, taps: tuple[str, ...], archive: WeightArchive) -> "LpipsConfig":
        """Load calibrated per-channel weights from ``lpips.<tap>`` entries."""
        weights = {tap: archive.get(f"lpips.{tap}") for tap in taps}
        return cls(taps=taps, weights=weights)


def _unit_normalize(f: Tensor) -> Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + _NORM_EPS)


def lpips(u, v, extractor: FeatureExtractor, cfg: LpipsConfig | None = None) -> Tensor:
    """Perceptual distance: weighted squared differences of channel-normalized
    features, spatially averaged per tap, summed over taps, batch mean."""
    cfg = cfg or LpipsConfig(taps=extractor.layer_taps)
    fu, fv = _extract_pair(u, v, extractor)
    total = None
    for tap in cfg.taps:
        if tap not in fu:
            raise LossInputError(f"extractor did not produce tap {tap!r}")
        du = _unit_normalize(fu[tap]) - _unit_normalize(fv[tap])
        w = cfg.weights.get(tap)
        if w is not None:
            w = torch.as_tensor(w, dtype=du.dtype, device=du.device)
            if w.numel() != du.shape[1]:
                raise LossInputError(
                    f"tap {tap!r} weight length {w.numel()} != channels {du.shape[1]}"
                )
            du = du * w.view(1, -1, 1, 1)
        # mean over H*W of squared channel norms, per image
        per_image = (du * du).sum(dim=1).flatten(1).mean(dim=1)
        total = per_image if total is None else total + per_image
    return total.mean()
