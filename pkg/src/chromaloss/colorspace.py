"""Image batch containers and differentiable RGB/Lab/grayscale conversions.

All conversions operate on rank-4 tensors (B x C x H x W) and are written
with plain torch ops so gradients flow through them, which lets RGB-space
losses train models that predict chrominance.

Normalized storage conventions:
  RGB   3 channels in [0, 1] (sRGB-encoded)
  LAB   L/100 in [0, 1], a/110 and b/110 in [-1, 1]
  AB    a/110, b/110 in [-1, 1]
  GRAY  single channel in [0, 1] (defined as L/100)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor

# Scale factors between CIE Lab units and normalized storage.
L_SCALE = 100.0
AB_SCALE = 110.0

# sRGB -> XYZ matrix (D65, IEC 61966-2-1 primaries). The white point is
# taken as the exact row sums so that RGB white maps to L=100, a=b=0.
_RGB2XYZ = torch.tensor(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ],
    dtype=torch.float64,
)
_XYZ2RGB = torch.linalg.inv(_RGB2XYZ)
_WHITE = _RGB2XYZ.sum(dim=1)

# Lab companding threshold: f(t) switches branch at t = (6/29)^3.
_DELTA = 6.0 / 29.0


class ColorSpace(Enum):
    RGB = "rgb"
    LAB = "lab"
    GRAY = "gray"
    AB = "ab"


_CHANNELS = {ColorSpace.RGB: 3, ColorSpace.LAB: 3, ColorSpace.GRAY: 1, ColorSpace.AB: 2}

# Declared per-channel (lo, hi) storage ranges.
_RANGES = {
    ColorSpace.RGB: ((0.0, 1.0),) * 3,
    ColorSpace.LAB: ((0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
    ColorSpace.GRAY: ((0.0, 1.0),),
    ColorSpace.AB: ((-1.0, 1.0), (-1.0, 1.0)),
}

# Slack for float rounding when validating declared ranges.
_RANGE_ATOL = 1e-3


class ColorSpaceError(ValueError):
    """Raised when an operation receives a batch in the wrong color space."""


@dataclass(frozen=True)
class ImageBatch:
    """A rank-4 image tensor with a declared color space.

    The per-channel normalization convention is fixed by the space (see
    module docstring); ``normalization`` exposes it for consumers.
    """

    values: Tensor
    space: ColorSpace

    def __post_init__(self):
        v = self.values
        if v.ndim != 4:
            raise ColorSpaceError(f"expected rank-4 values (B,C,H,W), got rank {v.ndim}")
        expected_c = _CHANNELS[self.space]
        if v.shape[1] != expected_c:
            raise ColorSpaceError(
                f"{self.space.name} batch must have {expected_c} channels, got {v.shape[1]}"
            )
        if not torch.isfinite(v).all():
            raise ColorSpaceError(f"{self.space.name} batch contains NaN or Inf values")
        for c, (lo, hi) in enumerate(self.normalization):
            ch = v[:, c]
            if ch.numel() and (ch.min() < lo - _RANGE_ATOL or ch.max() > hi + _RANGE_ATOL):
                raise ColorSpaceError(
                    f"{self.space.name} channel {c} outside declared range "
                    f"[{lo}, {hi}]: min={ch.min():.4f} max={ch.max():.4f}"
                )

    @property
    def normalization(self) -> tuple[tuple[float, float], ...]:
        return _RANGES[self.space]

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def spatial_size(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def require_space(self, space: ColorSpace) -> Tensor:
        if self.space is not space:
            raise ColorSpaceError(f"expected {space.name} batch, got {self.space.name}")
        return self.values


def _check_rgb_range(rgb: Tensor, strict: bool) -> Tensor:
    if rgb.numel() == 0:
        return rgb
    lo, hi = rgb.min().item(), rgb.max().item()
    if lo < -_RANGE_ATOL or hi > 1.0 + _RANGE_ATOL:
        if strict:
            raise ColorSpaceError(f"RGB values outside [0,1]: min={lo:.4f} max={hi:.4f}")
        warnings.warn(f"RGB values outside [0,1] clamped (min={lo:.4f}, max={hi:.4f})")
    return rgb.clamp(0.0, 1.0)


def _srgb_to_linear(c: Tensor) -> Tensor:
    # Inverse sRGB gamma. The linear segment below 0.04045 avoids the
    # infinite derivative a pure power law would have at 0.
    return torch.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: Tensor) -> Tensor:
    c = c.clamp_min(0.0)
    # Clamp the power branch at its selection threshold: its derivative blows
    # up at 0 and torch.where would propagate NaN grads from the unused side.
    powed = 1.055 * c.clamp_min(0.0031308) ** (1.0 / 2.4) - 0.055
    return torch.where(c <= 0.0031308, c * 12.92, powed)


def _lab_f(t: Tensor) -> Tensor:
    cube_root = t.clamp_min(_DELTA**3) ** (1.0 / 3.0)
    return torch.where(t > _DELTA**3, cube_root, t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(t: Tensor) -> Tensor:
    return torch.where(t > _DELTA, t**3, 3.0 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img: ImageBatch, strict: bool = False) -> ImageBatch:
    """Convert an sRGB batch to normalized Lab storage.

    Out-of-range inputs are clamped with a warning; ``strict=True`` raises
    instead.
    """
    rgb = _check_rgb_range(img.require_space(ColorSpace.RGB), strict)
    lin = _srgb_to_linear(rgb)
    m = _RGB2XYZ.to(dtype=lin.dtype, device=lin.device)
    white = _WHITE.to(dtype=lin.dtype, device=lin.device)
    xyz = torch.einsum("ij,bjhw->bihw", m, lin)
    f = _lab_f(xyz / white.view(1, 3, 1, 1))
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    lum = (116.0 * fy - 16.0) / L_SCALE
    a = 500.0 * (fx - fy) / AB_SCALE
    b = 200.0 * (fy - fz) / AB_SCALE
    lab = torch.stack([lum.clamp(0.0, 1.0), a.clamp(-1.0, 1.0), b.clamp(-1.0, 1.0)], dim=1)
    return ImageBatch(lab, ColorSpace.LAB)


def _lab_to_linear_rgb(lab: Tensor) -> Tensor:
    lum = lab[:, 0] * L_SCALE
    a = lab[:, 1] * AB_SCALE
    b = lab[:, 2] * AB_SCALE
    fy = (lum + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = torch.stack([fx, fy, fz], dim=1)
    white = _WHITE.to(dtype=lab.dtype, device=lab.device)
    xyz = _lab_f_inv(f) * white.view(1, 3, 1, 1)
    m = _XYZ2RGB.to(dtype=lab.dtype, device=lab.device)
    return torch.einsum("ij,bjhw->bihw", m, xyz)


def lab_to_rgb(img: ImageBatch) -> ImageBatch:
    """Convert normalized Lab storage back to sRGB; out-of-gamut results clamp."""
    lab = img.require_space(ColorSpace.LAB)
    rgb = _linear_to_srgb(_lab_to_linear_rgb(lab)).clamp(0.0, 1.0)
    return ImageBatch(rgb, ColorSpace.RGB)


def compress_chroma_to_gamut(img: ImageBatch, iterations: int = 16) -> ImageBatch:
    """Scale each out-of-gamut pixel's (a,b) toward neutral until it maps
    into sRGB, preserving L exactly (unlike RGB clamping, which shifts
    luminance). Chroma scale found by per-pixel bisection."""
    lab = img.require_space(ColorSpace.LAB)

    def in_gamut(scale: Tensor) -> Tensor:
        scaled = torch.cat([lab[:, :1], lab[:, 1:] * scale], dim=1)
        lin = _lab_to_linear_rgb(scaled)
        return ((lin > -1e-6) & (lin < 1.0 + 1e-6)).all(dim=1, keepdim=True)

    ones = torch.ones(lab.shape[0], 1, lab.shape[2], lab.shape[3], dtype=lab.dtype)
    ok = in_gamut(ones)
    if bool(ok.all()):
        return img
    lo = torch.zeros_like(ones)
    hi = ones.clone()
    for _ in range(iterations):
        mid = (lo + hi) / 2
        good = in_gamut(mid)
        lo = torch.where(good, mid, lo)
        hi = torch.where(good, hi, mid)
    scale = torch.where(ok, ones, lo)
    return ImageBatch(torch.cat([lab[:, :1], lab[:, 1:] * scale], dim=1), ColorSpace.LAB)


def rgb_to_gray(img: ImageBatch, strict: bool = False) -> ImageBatch:
    """Grayscale luminance in [0,1], defined as the Lab L channel over 100.

    Both the Lab and RGB training pipelines condition on this same signal.
    """
    lab = rgb_to_lab(img, strict=strict)
    return ImageBatch(lab.values[:, :1], ColorSpace.GRAY)


def replicate_gray(gray: ImageBatch) -> ImageBatch:
    """Replicate a 1-channel grayscale batch to the 3-channel network input."""
    g = gray.require_space(ColorSpace.GRAY)
    return ImageBatch(g.expand(-1, 3, -1, -1).contiguous(), ColorSpace.RGB)


def assemble_output(
    gray: ImageBatch, prediction: ImageBatch, target_space: ColorSpace
) -> ImageBatch:
    """Combine a prediction with the conditioning grayscale into an RGB batch.

    For LAB targets the prediction supplies (a,b) and the grayscale becomes
    the L channel; for RGB targets the prediction is clamped and returned.
    Differentiable so RGB-space losses can train Lab-predicting models.
    """
    if target_space is ColorSpace.LAB:
        ab = prediction.require_space(ColorSpace.AB)
        lum = gray.require_space(ColorSpace.GRAY)
        if ab.shape[2:] != lum.shape[2:] or ab.shape[0] != lum.shape[0]:
            raise ColorSpaceError(
                f"gray {tuple(lum.shape)} and prediction {tuple(ab.shape)} do not align"
            )
        lab = ImageBatch(torch.cat([lum, ab], dim=1), ColorSpace.LAB)
        return lab_to_rgb(lab)
    if target_space is ColorSpace.RGB:
        rgb = prediction.require_space(ColorSpace.RGB)
        return ImageBatch(rgb.clamp(0.0, 1.0), ColorSpace.RGB)
    raise ColorSpaceError(f"target_space must be LAB or RGB, got {target_space.name}")
