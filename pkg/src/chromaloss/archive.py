"""Named-tensor weight archives for encoder and feature-extractor weights.

An archive is a flat mapping from layer name to a float32 array, stored on
disk as a compressed .npz file. Checkpoints (which also carry optimizer and
RNG state) use torch serialization instead; this format exists for portable
weight exchange.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch


class ArchiveError(KeyError):
    """Raised when a requested tensor is missing or has the wrong shape."""


class WeightArchive:
    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            self.put(name, arr)

    def put(self, name: str, array) -> None:
        if isinstance(array, torch.Tensor):
            array = array.detach().cpu().numpy()
        self._tensors[name] = np.asarray(array, dtype=np.float32)

    def get(self, name: str, expected_shape: tuple[int, ...] | None = None) -> torch.Tensor:
        if name not in self._tensors:
            raise ArchiveError(f"archive has no tensor named {name!r}")
        arr = self._tensors[name]
        if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
            raise ArchiveError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(expected_shape)}"
            )
        return torch.from_numpy(arr.copy())

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def keys(self):
        return self._tensors.keys()

    def save(self, path: str | Path) -> None:
        np.savez_compressed(path, **self._tensors)

    @classmethod
    def load(cls, path: str | Path) -> "WeightArchive":
        with np.load(path) as data:
            return cls({name: data[name] for name in data.files})
