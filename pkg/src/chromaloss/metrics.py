"""Quantitative evaluation suite: PSNR, SSIM, FID, LPIPS, AuC raw accuracy.

All image metrics are computed on RGB batches in [0,1]. Per-image metrics
are pure functions; FID statistics accumulate through a mergeable
accumulator so sets can be streamed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .colorspace import AB_SCALE, ColorSpace, ImageBatch, rgb_to_lab
from .losses import FeatureExtractor, LpipsConfig, lpips, mae_loss, mse_loss

PSNR_CAP = 100.0
_MSE_FLOOR = 1e-10


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PSNR


def psnr(u: ImageBatch, v: ImageBatch, peak: float | None = None) -> np.ndarray:
    """Per-image PSNR in dB; ``peak`` defaults to each ground-truth image's
    max value. Identical images cap at PSNR_CAP."""
    uu = u.require_space(ColorSpace.RGB).double()
    vv = v.require_space(ColorSpace.RGB).double()
    if uu.shape != vv.shape:
        raise MetricError(f"shape mismatch: {tuple(uu.shape)} vs {tuple(vv.shape)}")
    mse = ((uu - vv) ** 2).flatten(1).mean(dim=1)
    peaks = uu.flatten(1).amax(dim=1) if peak is None else torch.full_like(mse, peak)
    vals = 20.0 * torch.log10(peaks.clamp_min(1e-8)) - 10.0 * torch.log10(mse.clamp_min(_MSE_FLOOR))
    vals = torch.where(mse < _MSE_FLOOR, torch.full_like(vals, PSNR_CAP), vals)
    return vals.numpy()


# ---------------------------------------------------------------------------
# SSIM


@dataclass
class SsimConfig:
    dynamic_range: float = 1.0
    window_size: int = 11
    window_sigma: float = 1.5
    mode: str = "windowed"  # or "global"
    c3_half_c2: bool = True

    def __post_init__(self):
        if self.dynamic_range <= 0 or self.window_size < 1 or self.window_sigma <= 0:
            raise MetricError("invalid SSIM configuration")
        if self.mode not in ("windowed", "global"):
            raise MetricError(f"unknown SSIM mode {self.mode!r}")

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2 if self.c3_half_c2 else self.c2


def gaussian_window(size: int, sigma: float) -> Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords**2) / (2 * sigma * sigma))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def _ssim_terms(mu_a, mu_b, var_a, var_b, cov, cfg: SsimConfig):
    sa = torch.sqrt(var_a.clamp_min(0))
    sb = torch.sqrt(var_b.clamp_min(0))
    lum = (2 * mu_a * mu_b + cfg.c1) / (mu_a**2 + mu_b**2 + cfg.c1)
    con = (2 * sa * sb + cfg.c2) / (var_a + var_b + cfg.c2)
    st = (cov + cfg.c3) / (sa * sb + cfg.c3)
    return lum * con * st


def ssim(u: ImageBatch, v: ImageBatch, cfg: SsimConfig | None = None) -> np.ndarray:
    """Per-image structural similarity: product of luminance, contrast and
    structure terms, averaged over space and channels.

    ``windowed`` mode uses local Gaussian statistics (valid positions only);
    ``global`` mode evaluates the literal formula on whole-image statistics.
    """
    cfg = cfg or SsimConfig()
    uu = u.require_space(ColorSpace.RGB).double()
    vv = v.require_space(ColorSpace.RGB).double()
    if uu.shape != vv.shape:
        raise MetricError(f"shape mismatch: {tuple(uu.shape)} vs {tuple(vv.shape)}")
    b, c, h, w = uu.shape
    if cfg.mode == "global":
        mu_a = uu.flatten(2).mean(dim=2)
        mu_b = vv.flatten(2).mean(dim=2)
        var_a = uu.flatten(2).var(dim=2, unbiased=False)
        var_b = vv.flatten(2).var(dim=2, unbiased=False)
        cov = ((uu - mu_a.view(b, c, 1, 1)) * (vv - mu_b.view(b, c, 1, 1))).flatten(2).mean(dim=2)
        return _ssim_terms(mu_a, mu_b, var_a, var_b, cov, cfg).mean(dim=1).numpy()

    if cfg.window_size > h or cfg.window_size > w:
        raise MetricError(f"window {cfg.window_size} larger than image {h}x{w}")
    kernel = gaussian_window(cfg.window_size, cfg.window_sigma)
    weight = kernel.expand(c, 1, -1, -1)
    conv = lambda t: torch.conv2d(t, weight, groups=c)
    mu_a, mu_b = conv(uu), conv(vv)
    var_a = conv(uu * uu) - mu_a**2
    var_b = conv(vv * vv) - mu_b**2
    cov = conv(uu * vv) - mu_a * mu_b
    ssim_map = _ssim_terms(mu_a, mu_b, var_a, var_b, cov, cfg)
    return ssim_map.flatten(1).mean(dim=1).numpy()


# ---------------------------------------------------------------------------
# FID


@dataclass(frozen=True)
class EmbeddingStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise MetricError("need at least 2 samples for an unbiased covariance")
        if self.sigma.shape != (self.mu.shape[0], self.mu.shape[0]):
            raise MetricError("sigma must be D x D matching mu")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8):
            raise MetricError("sigma must be symmetric")


def _psd_sqrt(sym: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition square root with negative eigenvalues clipped."""
    evals, evecs = np.linalg.eigh(sym)
    if evals.min() < -1e-6:
        raise MetricError(f"covariance has negative eigenvalue {evals.min():.3e}")
    evals = np.clip(evals, 0.0, None)
    return evecs, np.sqrt(evals)


def fid(real: EmbeddingStats, gen: EmbeddingStats) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    The matrix square root applies to the covariance product, computed as
    tr sqrt(A Sg A) with A = sqrt(Sr), which is symmetric PSD.
    """
    if real.mu.shape != gen.mu.shape:
        raise MetricError("embedding dimensions differ")
    sr = (real.sigma + real.sigma.T) / 2
    sg = (gen.sigma + gen.sigma.T) / 2
    evecs, sq = _psd_sqrt(sr)
    _psd_sqrt(sg)  # reject invalid inputs symmetrically
    a = evecs @ np.diag(sq) @ evecs.T
    inner = a @ sg @ a
    inner = (inner + inner.T) / 2
    ievals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    mean_term = float(np.sum((real.mu - gen.mu) ** 2))
    trace_term = float(np.trace(sr) + np.trace(sg) - 2.0 * np.sum(np.sqrt(ievals)))
    return mean_term + trace_term


class EmbeddingAccumulator:
    """Mergeable running sums for mean/covariance estimation."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.n = 0
        self._sum = None
        self._outer = None

    def update(self, embeddings) -> None:
        e = np.asarray(embeddings.detach().cpu() if isinstance(embeddings, Tensor) else embeddings)
        e = np.atleast_2d(e).astype(np.float64)
        if self.dim is None:
            self.dim = e.shape[1]
            self._sum = np.zeros(self.dim)
            self._outer = np.zeros((self.dim, self.dim))
        if e.shape[1] != self.dim:
            raise MetricError(f"embedding dim {e.shape[1]} != accumulator dim {self.dim}")
        self.n += e.shape[0]
        self._sum += e.sum(axis=0)
        self._outer += e.T @ e

    def merge(self, other: "EmbeddingAccumulator") -> "EmbeddingAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.dim, self.n = other.dim, other.n
            self._sum, self._outer = other._sum.copy(), other._outer.copy()
            return self
        if self.dim != other.dim:
            raise MetricError("cannot merge accumulators of different dims")
        self.n += other.n
        self._sum += other._sum
        self._outer += other._outer
        return self

    def finalize(self) -> EmbeddingStats:
        if self.n < 2:
            raise MetricError(f"need at least 2 samples, have {self.n}")
        mu = self._sum / self.n
        sigma = (self._outer - self.n * np.outer(mu, mu)) / (self.n - 1)
        sigma = (sigma + sigma.T) / 2
        return EmbeddingStats(mu=mu, sigma=sigma, n=self.n)


class PooledConvEmbedder(nn.Module):
    """Deterministic conv tower with global average pooling.

    A fixed-seed stand-in for an ImageNet-classifier embedding: FID numbers
    are only comparable across runs using the same embedder instance/seed.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, dim, 3, stride=2, padding=1)
        for conv in (self.conv1, self.conv2, self.conv3):
            nn.init.trunc_normal_(conv.weight, std=0.2, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.dim = dim

    def forward(self, rgb) -> Tensor:
        x = rgb.values if isinstance(rgb, ImageBatch) else rgb
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = torch.relu(self.conv3(x))
        return x.mean(dim=(2, 3))


def embed_statistics(images, embedder) -> EmbeddingStats:
    """Mean and unbiased covariance of pooled embeddings over an image set."""
    acc = EmbeddingAccumulator()
    with torch.no_grad():
        for img in images:
            acc.update(embedder(img))
    return acc.finalize()


# ---------------------------------------------------------------------------
# AuC raw accuracy

AUC_THRESHOLDS = 151  # integer thresholds 0..150 inclusive


class _AucAccumulator:
    def __init__(self):
        self.counts = np.zeros(AUC_THRESHOLDS, dtype=np.int64)
        self.total = 0

    def update(self, pred_ab: Tensor, gt_ab: Tensor) -> None:
        d = (pred_ab.double() - gt_ab.double()) * AB_SCALE
        dist = torch.sqrt((d * d).sum(dim=1)).flatten()
        # bucket by the first integer threshold that covers each distance
        buckets = torch.ceil(dist - 1e-6).clamp(0, AUC_THRESHOLDS).long()
        binc = torch.bincount(buckets, minlength=AUC_THRESHOLDS + 1)[:AUC_THRESHOLDS]
        self.counts += binc.numpy()
        self.total += dist.numel()

    def finalize(self) -> tuple[np.ndarray, float]:
        if self.total == 0:
            raise MetricError("no pixels accumulated")
        curve = np.cumsum(self.counts) / self.total
        return curve, float(curve.mean())


def auc_raw_accuracy(pred_ab: ImageBatch, gt_ab: ImageBatch) -> tuple[np.ndarray, float]:
    """Fraction of pixels whose ab distance (unnormalized units) is within
    each integer threshold 0..150, plus the mean of that curve."""
    p = pred_ab.require_space(ColorSpace.AB)
    g = gt_ab.require_space(ColorSpace.AB)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    acc = _AucAccumulator()
    acc.update(p, g)
    return acc.finalize()


# ---------------------------------------------------------------------------
# Set-level evaluation


@dataclass
class EvalConfig:
    ssim: SsimConfig = field(default_factory=SsimConfig)
    lpips_extractor: FeatureExtractor | None = None
    lpips_cfg: LpipsConfig | None = None
    psnr_peak: float | None = None


SUMMARY_COLUMNS = ("mae", "mse", "psnr", "ssim", "lpips", "fid")


@dataclass
class MetricReport:
    per_image: dict[str, list[float]]
    fid: float
    auc: float
    auc_curve: np.ndarray
    names: list[str]

    @property
    def n_images(self) -> int:
        return len(self.names)

    def aggregates(self) -> dict[str, float]:
        out = {k: float(np.mean(v)) for k, v in self.per_image.items()}
        out["fid"] = self.fid
        out["auc"] = self.auc
        return out

    def write_csv(self, path: str | Path) -> None:
        keys = [k for k in ("mae", "mse", "psnr", "ssim", "lpips") if k in self.per_image]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image"] + keys + ["identical"])
            for i, name in enumerate(self.names):
                row = [name] + [f"{self.per_image[k][i]:.6f}" for k in keys]
                row.append(str(self.per_image["psnr"][i] >= PSNR_CAP))
                writer.writerow(row)

    def summary(self) -> dict[str, float]:
        agg = self.aggregates()
        out = {k: agg[k] for k in SUMMARY_COLUMNS if k in agg}
        out["auc"] = self.auc
        out["n_images"] = self.n_images
        return out

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")

    def format_summary(self) -> str:
        agg = self.aggregates()
        header = "  ".join(f"{c.upper():>9}" for c in SUMMARY_COLUMNS)
        values = "  ".join(f"{agg.get(c, math.nan):9.4f}" for c in SUMMARY_COLUMNS)
        return f"{header}\n{values}"


def evaluate_set(pairs, embedder, cfg: EvalConfig | None = None, names=None) -> MetricReport:
    """Stream (prediction, ground truth) RGB pairs into per-image metrics
    plus set-level FID and AuC."""
    cfg = cfg or EvalConfig()
    per_image: dict[str, list[float]] = {"mae": [], "mse": [], "psnr": [], "ssim": []}
    if cfg.lpips_extractor is not None:
        per_image["lpips"] = []
    real_acc, gen_acc = EmbeddingAccumulator(), EmbeddingAccumulator()
    auc_acc = _AucAccumulator()
    image_names: list[str] = []
    idx = 0
    with torch.no_grad():
        for pred, gt in pairs:
            p = pred.require_space(ColorSpace.RGB)
            g = gt.require_space(ColorSpace.RGB)
            if p.shape != g.shape:
                raise MetricError(
                    f"pair {idx}: prediction {tuple(p.shape)} vs ground truth {tuple(g.shape)}"
                )
            psnr_vals = psnr(pred, gt, peak=cfg.psnr_peak)
            ssim_vals = ssim(pred, gt, cfg.ssim)
            for b in range(p.shape[0]):
                pi = ImageBatch(p[b : b + 1], ColorSpace.RGB)
                gi = ImageBatch(g[b : b + 1], ColorSpace.RGB)
                per_image["mae"].append(float(mae_loss(pi.values, gi.values, "l1")))
                per_image["mse"].append(float(mse_loss(pi.values, gi.values)))
                per_image["psnr"].append(float(psnr_vals[b]))
                per_image["ssim"].append(float(ssim_vals[b]))
                if cfg.lpips_extractor is not None:
                    per_image["lpips"].append(
                        float(lpips(pi, gi, cfg.lpips_extractor, cfg.lpips_cfg))
                    )
                image_names.append(names[idx] if names else f"image_{idx:05d}")
                idx += 1
            auc_acc.update(rgb_to_lab(pred).values[:, 1:], rgb_to_lab(gt).values[:, 1:])
            if embedder is not None:
                gen_acc.update(embedder(pred))
                real_acc.update(embedder(gt))
    if names is not None and idx != len(names):
        raise MetricError(f"{len(names)} names given for {idx} images")
    curve, auc = auc_acc.finalize()
    fid_value = fid(real_acc.finalize(), gen_acc.finalize()) if embedder is not None else math.nan
    return MetricReport(
        per_image=per_image, fid=fid_value, auc=auc, auc_curve=curve, names=image_names
    )
