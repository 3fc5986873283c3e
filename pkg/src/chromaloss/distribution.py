"""Quantized chrominance distributions, their losses, and color decoding.

A ColorQuantizer fixes a 2-D grid over the (a,b) plane restricted to the
sRGB gamut; per-pixel categorical distributions over those bins (stored
B x K x H x W) can be compared with KL / cross-entropy style losses and
decoded back to colors by expectation or median.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .colorspace import AB_SCALE, ColorSpace, ImageBatch, rgb_to_lab

_LOG_EPS = 1e-10


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class ColorQuantizer:
    """In-gamut (a,b) bin centroids on a regular grid, in normalized units."""

    grid_step: float
    bin_centers: Tensor  # K x 2, normalized a/110, b/110

    def __post_init__(self):
        if self.bin_centers.ndim != 2 or self.bin_centers.shape[1] != 2:
            raise DistributionError("bin_centers must be K x 2")
        if self.bin_centers.shape[0] == 0:
            raise DistributionError("quantizer has no bins")

    @property
    def bins(self) -> int:
        return self.bin_centers.shape[0]

    @classmethod
    def build(cls, grid_step_ab: float = 10.0, rgb_samples: int = 64) -> "ColorQuantizer":
        """Build the grid over ab in [-110, 110] (given step, unnormalized
        units) and keep the bins hit by a dense sampling of the sRGB cube."""
        if grid_step_ab <= 0:
            raise DistributionError("grid step must be positive")
        axis = torch.linspace(0, 1, rgb_samples, dtype=torch.float64)
        r, g, b = torch.meshgrid(axis, axis, axis, indexing="ij")
        rgb = torch.stack([r, g, b], dim=0).reshape(1, 3, rgb_samples**2, rgb_samples)
        lab = rgb_to_lab(ImageBatch(rgb, ColorSpace.RGB)).values
        ab = lab[0, 1:].reshape(2, -1).T * AB_SCALE  # N x 2, unnormalized

        half = grid_step_ab / 2.0
        edges_lo = -110.0
        n_cells = int(round(220.0 / grid_step_ab))
        idx = torch.clamp(((ab - edges_lo) / grid_step_ab).floor().long(), 0, n_cells - 1)
        flat = idx[:, 0] * n_cells + idx[:, 1]
        occupied = torch.unique(flat)
        ai = torch.div(occupied, n_cells, rounding_mode="floor")
        bi = occupied % n_cells
        centers = torch.stack(
            [edges_lo + half + ai.double() * grid_step_ab, edges_lo + half + bi.double() * grid_step_ab],
            dim=1,
        )
        return cls(grid_step=grid_step_ab / AB_SCALE, bin_centers=(centers / AB_SCALE).float())

    def save_table(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("# index a b (normalized ab units)\n")
            for k, (a, b) in enumerate(self.bin_centers.tolist()):
                fh.write(f"{k} {a:.8f} {b:.8f}\n")

    @classmethod
    def load_table(cls, path: str | Path, grid_step: float | None = None) -> "ColorQuantizer":
        rows = []
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            _, a, b = line.split()
            rows.append((float(a), float(b)))
        centers = torch.tensor(rows, dtype=torch.float32)
        if grid_step is None:
            # infer from the smallest nonzero coordinate gap
            coords = torch.unique(centers[:, 0])
            grid_step = float(torch.diff(coords).min()) if coords.numel() > 1 else 1.0
        return cls(grid_step=grid_step, bin_centers=centers)

    def nearest_bin(self, ab: Tensor) -> Tensor:
        """ab: B x 2 x H x W normalized -> B x H x W bin indices."""
        b, _, h, w = ab.shape
        flat = ab.permute(0, 2, 3, 1).reshape(-1, 2)
        d = torch.cdist(flat.float(), self.bin_centers)
        return d.argmin(dim=1).reshape(b, h, w)


@dataclass(frozen=True)
class PixelDistribution:
    """Per-pixel categorical distribution over K color bins (B x K x H x W)."""

    probs: Tensor

    def __post_init__(self):
        p = self.probs
        if p.ndim != 4:
            raise DistributionError(f"probs must be B x K x H x W, got rank {p.ndim}")
        if p.min() < -1e-7:
            raise DistributionError("probabilities must be nonnegative")
        sums = p.sum(dim=1)
        if (sums - 1.0).abs().max() > 1e-5:
            raise DistributionError("per-pixel probabilities must sum to 1 within 1e-5")

    @property
    def bins(self) -> int:
        return self.probs.shape[1]


def encode_targets(
    ab: ImageBatch, q: ColorQuantizer, smoothing_sigma: float = 0.0
) -> PixelDistribution:
    """Ground-truth encoding: one-hot on the nearest centroid, or Gaussian
    weights over the 5 nearest centroids when ``smoothing_sigma`` > 0."""
    values = ab.require_space(ColorSpace.AB)
    b, _, h, w = values.shape
    flat = values.permute(0, 2, 3, 1).reshape(-1, 2).float()
    d = torch.cdist(flat, q.bin_centers)  # N x K
    n = flat.shape[0]
    probs = torch.zeros(n, q.bins, dtype=values.dtype)
    if smoothing_sigma <= 0:
        probs[torch.arange(n), d.argmin(dim=1)] = 1.0
    else:
        k = min(5, q.bins)
        dist, idx = torch.topk(d, k, dim=1, largest=False)
        wts = torch.exp(-(dist**2) / (2.0 * smoothing_sigma**2))
        wts = wts / wts.sum(dim=1, keepdim=True)
        probs.scatter_(1, idx, wts.to(probs.dtype))
    return PixelDistribution(probs.reshape(b, h, w, q.bins).permute(0, 3, 1, 2))


def _check_same_bins(rho: PixelDistribution, rho_hat: PixelDistribution) -> tuple[Tensor, Tensor]:
    if rho.probs.shape != rho_hat.probs.shape:
        raise DistributionError(
            f"shape mismatch: {tuple(rho.probs.shape)} vs {tuple(rho_hat.probs.shape)}"
        )
    return rho.probs, rho_hat.probs


def _kl_map(p: Tensor, q: Tensor) -> Tensor:
    """Per-pixel KL(p || q) with epsilon-floored logarithms, B x H x W."""
    return (p * (torch.log(p + _LOG_EPS) - torch.log(q + _LOG_EPS))).sum(dim=1)


def kl_divergence(rho: PixelDistribution, rho_hat: PixelDistribution) -> Tensor:
    p, q = _check_same_bins(rho, rho_hat)
    return _kl_map(p, q).mean()


def entropy(rho: PixelDistribution) -> Tensor:
    p = rho.probs
    return -(p * torch.log(p + _LOG_EPS)).sum(dim=1).mean()


def cross_entropy(
    rho: PixelDistribution, rho_hat: PixelDistribution, bin_weights: Tensor | None = None
) -> Tensor:
    """Pixel-mean cross entropy; optional per-bin weights rescale the
    ground-truth mass (rare-color rebalancing, off by default)."""
    p, q = _check_same_bins(rho, rho_hat)
    if bin_weights is not None:
        w = torch.as_tensor(bin_weights, dtype=p.dtype).view(1, -1, 1, 1)
        if w.numel() != p.shape[1]:
            raise DistributionError(f"bin_weights length {w.numel()} != K {p.shape[1]}")
        p = p * w
    return -(p * torch.log(q + _LOG_EPS)).sum(dim=1).mean()


def hue_chroma_loss(
    rho_c: PixelDistribution,
    rho_hat_c: PixelDistribution,
    rho_h: PixelDistribution,
    rho_hat_h: PixelDistribution,
    chroma_gt: Tensor,
    lam: float = 5.0,
) -> Tensor:
    """Chroma KL plus chroma-gated hue KL: the hue term is weighted by the
    per-pixel ground-truth chroma in [0,1] so it vanishes for gray pixels."""
    pc, qc = _check_same_bins(rho_c, rho_hat_c)
    ph, qh = _check_same_bins(rho_h, rho_hat_h)
    if chroma_gt.shape != pc.shape[:1] + pc.shape[2:]:
        raise DistributionError(
            f"chroma_gt shape {tuple(chroma_gt.shape)} must be B x H x W "
            f"{tuple(pc.shape[:1] + pc.shape[2:])}"
        )
    if chroma_gt.min() < 0 or chroma_gt.max() > 1:
        raise DistributionError("chroma_gt must lie in [0,1]")
    return (_kl_map(pc, qc) + lam * chroma_gt * _kl_map(ph, qh)).mean()


def nll_loss(
    rho_hat: PixelDistribution, target_bins: Tensor, bin_weights: Tensor | None = None
) -> Tensor:
    """Pixel-mean negative log-likelihood of the target bin indices."""
    q = rho_hat.probs
    if target_bins.shape != q.shape[:1] + q.shape[2:]:
        raise DistributionError("target_bins must be B x H x W")
    if target_bins.min() < 0 or target_bins.max() >= q.shape[1]:
        raise DistributionError(f"bin index out of range [0, {q.shape[1]})")
    picked = q.gather(1, target_bins.long().unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked + _LOG_EPS)
    if bin_weights is not None:
        w = torch.as_tensor(bin_weights, dtype=q.dtype)
        nll = nll * w[target_bins.long()]
    return nll.mean()


def expectation_decode(rho_hat: PixelDistribution, q: ColorQuantizer) -> ImageBatch:
    """Probability-weighted mean of the bin centroids, per pixel."""
    p = rho_hat.probs
    if p.shape[1] != q.bins:
        raise DistributionError(f"distribution has {p.shape[1]} bins, quantizer {q.bins}")
    centers = q.bin_centers.to(p.dtype)
    ab = torch.einsum("bkhw,kc->bchw", p, centers)
    return ImageBatch(ab.clamp(-1.0, 1.0), ColorSpace.AB)


def median_decode(marginal: Tensor, bin_values: Tensor) -> Tensor:
    """Per-pixel median over a 1-D marginal (B x K x H x W): the smallest
    bin value whose cumulative mass reaches 0.5. Ties take the first bin."""
    if marginal.ndim != 4:
        raise DistributionError("marginal must be B x K x H x W")
    if marginal.sum(dim=1).min() <= 0:
        raise DistributionError("marginal has an all-zero histogram")
    values = torch.as_tensor(bin_values, dtype=marginal.dtype)
    if values.numel() != marginal.shape[1]:
        raise DistributionError("bin_values length must match K")
    cum = marginal.cumsum(dim=1)
    # first index where cumulative mass >= 0.5 (small slack for float sums)
    reached = cum >= 0.5 - 1e-9
    first = reached.float().argmax(dim=1)
    return values[first]
