"""Dataset ingestion, grayscale filtering, and deterministic preprocessing.

Training images are resized so the smallest side matches the crop size
(aspect preserved, bilinear) and then square-cropped at an offset drawn
from a counter-based generator keyed by (seed, epoch, entry index), so the
pipeline is reproducible regardless of worker scheduling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .colorspace import ColorSpace, ImageBatch, replicate_gray, rgb_to_gray, rgb_to_lab

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

# An image stored as RGB still counts as grayscale when its channels agree
# within this 8-bit tolerance everywhere.
GRAY_CHANNEL_TOLERANCE = 2


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    width: int
    height: int
    is_grayscale: bool
    index: int  # stable position among color entries; -1 for filtered ones


@dataclass
class DatasetManifest:
    split: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    skipped: int = 0  # unreadable files dropped during scan

    def active(self) -> list[ManifestEntry]:
        """Entries that participate in iteration (grayscale ones excluded)."""
        return [e for e in self.entries if not e.is_grayscale]

    def __len__(self) -> int:
        return len(self.active())

    def save(self, path: str | Path) -> None:
        lines = [f"# split={self.split} seed={self.seed}"]
        for e in self.entries:
            lines.append(f"{e.path}\t{e.width}\t{e.height}\t{int(e.is_grayscale)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise DataError(f"{path}: missing manifest header")
        header = dict(kv.split("=") for kv in lines[0][1:].split())
        manifest = cls(split=header["split"], seed=int(header["seed"]))
        index = 0
        for line in lines[1:]:
            if not line.strip():
                continue
            p, w, h, gray = line.rsplit("\t", 3)
            is_gray = bool(int(gray))
            manifest.entries.append(
                ManifestEntry(p, int(w), int(h), is_gray, -1 if is_gray else index)
            )
            if not is_gray:
                index += 1
        return manifest


def _is_grayscale_image(img: Image.Image) -> bool:
    if img.mode in ("L", "LA", "1", "I", "I;16"):
        return True
    arr = np.asarray(img.convert("RGB"), dtype=np.int16)
    drg = np.abs(arr[..., 0] - arr[..., 1]).max()
    dgb = np.abs(arr[..., 1] - arr[..., 2]).max()
    return max(int(drg), int(dgb)) <= GRAY_CHANNEL_TOLERANCE


def scan(root: str | Path, split: str, seed: int = 0) -> DatasetManifest:
    """Build a manifest over all decodable images under ``root``, in
    lexicographic path order, flagging grayscale images for exclusion."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    paths = sorted(
        str(p.relative_to(root)).replace("\\", "/")
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    manifest = DatasetManifest(split=split, seed=seed)
    index = 0
    for rel in paths:
        full = root / rel
        try:
            with Image.open(full) as img:
                width, height = img.size
                gray = _is_grayscale_image(img)
        except Exception as exc:  # undecodable file: log and move on
            log.warning("skipping unreadable image %s: %s", full, exc)
            manifest.skipped += 1
            continue
        manifest.entries.append(
            ManifestEntry(str(full), width, height, gray, -1 if gray else index)
        )
        if not gray:
            index += 1
    if manifest.skipped:
        log.warning("scan(%s): skipped %d unreadable files", root, manifest.skipped)
    return manifest


def _crop_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    # Philox is counter-based: the key alone fixes the stream.
    key = [np.uint64(seed), (np.uint64(epoch) << np.uint64(32)) + np.uint64(index)]
    return np.random.Generator(np.random.Philox(key=key))


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    key = [np.uint64(seed), (np.uint64(1) << np.uint64(63)) + np.uint64(epoch)]
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class TrainingExample:
    gray: ImageBatch  # 1 x 1 x S x S luminance
    gray3: ImageBatch  # replicated network input
    target: ImageBatch  # AB or RGB, per configured space
    rgb: ImageBatch  # ground-truth RGB (for critics and metrics)


def decode_rgb(path: str | Path) -> torch.Tensor:
    """Decode an image file to a 1 x 3 x H x W float tensor in [0,1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def _resize_smallest_side(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    if min(w, h) == size:
        return img
    if w <= h:
        new_w, new_h = size, int(round(h * size / w))
    else:
        new_w, new_h = int(round(w * size / h)), size
    return img.resize((new_w, new_h), Image.Resampling.BILINEAR)


def preprocess_train(
    entry: ManifestEntry,
    seed: int,
    epoch: int = 0,
    target_space: ColorSpace = ColorSpace.LAB,
    crop_size: int = 256,
) -> TrainingExample:
    """Deterministic resize-and-crop of one entry into a training pair."""
    if target_space not in (ColorSpace.LAB, ColorSpace.RGB):
        raise DataError("target_space must be LAB or RGB")
    try:
        with Image.open(entry.path) as img:
            img = _resize_smallest_side(img.convert("RGB"), crop_size)
            w, h = img.size
            rng = _crop_rng(seed, epoch, entry.index)
            x0 = int(rng.integers(0, w - crop_size + 1))
            y0 = int(rng.integers(0, h - crop_size + 1))
            img = img.crop((x0, y0, x0 + crop_size, y0 + crop_size))
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {entry.path}: {exc}") from exc
    rgb = ImageBatch(torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0), ColorSpace.RGB)
    gray = rgb_to_gray(rgb)
    if target_space is ColorSpace.LAB:
        target = ImageBatch(rgb_to_lab(rgb).values[:, 1:], ColorSpace.AB)
    else:
        target = rgb
    return TrainingExample(gray=gray, gray3=replicate_gray(gray), target=target, rgb=rgb)


@dataclass(frozen=True)
class TrainingBatch:
    indices: tuple[int, ...]
    gray: ImageBatch
    gray3: ImageBatch
    target: ImageBatch
    rgb: ImageBatch


def _stack(examples: list[TrainingExample], indices: list[int]) -> TrainingBatch:
    cat = lambda batches: torch.cat([b.values for b in batches], dim=0)
    return TrainingBatch(
        indices=tuple(indices),
        gray=ImageBatch(cat([e.gray for e in examples]), ColorSpace.GRAY),
        gray3=ImageBatch(cat([e.gray3 for e in examples]), ColorSpace.RGB),
        target=ImageBatch(cat([e.target for e in examples]), examples[0].target.space),
        rgb=ImageBatch(cat([e.rgb for e in examples]), ColorSpace.RGB),
    )


def epoch_chunks(manifest: DatasetManifest, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Deterministic epoch-keyed shuffle, split into batch-sized chunks of
    positions into ``manifest.active()``. The partial tail chunk is kept."""
    entries = manifest.active()
    if not entries:
        raise DataError("manifest has no color entries")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = _shuffle_rng(seed, epoch).permutation(len(entries))
    return [list(order[s : s + batch_size]) for s in range(0, len(entries), batch_size)]


def load_chunk(
    manifest: DatasetManifest,
    chunk: list[int],
    seed: int,
    epoch: int,
    target_space: ColorSpace = ColorSpace.LAB,
    crop_size: int = 256,
) -> TrainingBatch:
    entries = manifest.active()
    examples = [preprocess_train(entries[i], seed, epoch, target_space, crop_size) for i in chunk]
    return _stack(examples, [entries[i].index for i in chunk])


def batch_iterator(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    epoch: int,
    target_space: ColorSpace = ColorSpace.LAB,
    crop_size: int = 256,
):
    """Yield TrainingBatches in an epoch-keyed deterministic shuffle order.

    The final partial batch is kept. Batches carry the entry indices they
    were assembled from.
    """
    for chunk in epoch_chunks(manifest, batch_size, seed, epoch):
        yield load_chunk(manifest, chunk, seed, epoch, target_space, crop_size)


def batches_per_epoch(manifest: DatasetManifest, batch_size: int) -> int:
    n = len(manifest.active())
    return (n + batch_size - 1) // batch_size
