"""In-memory datasets: named HxWx3 float arrays, hash splits, batching."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .config import ConfigError


@dataclass
class Sample:
    name: str
    image: np.ndarray  # H x W x 3 in [0, 1]
    reference: np.ndarray | None = None
    illumination: np.ndarray | None = None


def to_tensor(images, dtype=torch.float64) -> torch.Tensor:
    """HxWx3 array (or a list of equally-sized ones) -> (B, 3, H, W) tensor."""
    if isinstance(images, np.ndarray):
        images = [images]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigError(f"cannot batch images of different sizes: {sorted(shapes)}")
    arr = np.stack(images).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def to_image(x: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> HxWxC float64 array."""
    x = x.detach()
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError("to_image expects a single image")
        x = x[0]
    return x.permute(1, 2, 0).to(torch.float64).numpy().copy()


def _name_key(name: str) -> str:
    return hashlib.sha256(name.encode()).hexdigest()


def split_by_hash(samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """Deterministic 50/50 split by file-name hash: the lower-hash half trains."""
    if len(samples) < 2:
        raise ConfigError("search needs at least two images (train and validation split)")
    ordered = sorted(samples, key=lambda s: (_name_key(s.name), s.name))
    half = (len(ordered) + 1) // 2
    train = sorted(ordered[:half], key=lambda s: s.name)
    val = sorted(ordered[half:], key=lambda s: s.name)
    return train, val


def batches(samples: list[Sample], batch_size: int, seed: int, epoch: int,
            shuffle: bool = True, dtype=torch.float64) -> list[torch.Tensor]:
    """Fixed-order batches; the permutation depends only on (seed, epoch)."""
    idx = np.arange(len(samples))
    if shuffle:
        idx = np.random.default_rng([seed, epoch]).permutation(len(samples))
    out = []
    for start in range(0, len(idx), batch_size):
        chunk = [samples[i].image for i in idx[start:start + batch_size]]
        out.append(to_tensor(chunk, dtype))
    return out
