"""8-bit image output for colorization results."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .colorspace import ColorSpace, ImageBatch


def write_rgb_image(batch: ImageBatch, path: str | Path) -> None:
    """Write the first image of an RGB batch as an 8-bit file."""
    rgb = batch.require_space(ColorSpace.RGB)
    arr = rgb[0].detach().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)
