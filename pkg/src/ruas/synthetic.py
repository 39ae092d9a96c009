"""Synthetic low-light pairs for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .data import Sample


def _smooth_field(rng: np.random.Generator, size: int, blobs: int = 3) -> np.ndarray:
    """Low-frequency field in [0, 1]: a random ramp plus a few broad Gaussian bumps."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    f = np.cos(theta) * xx + np.sin(theta) * yy
    for _ in range(blobs):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.15, 0.4)
        f = f + rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    f = f - f.min()
    return f / f.max() if f.max() > 0 else f


def _clean_image(rng: np.random.Generator, size: int, shapes: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.05, 0.95, (2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) / np.sqrt(2) + 0.5
    img = c0 + (c1 - c0) * ramp[..., None]
    for _ in range(shapes):
        color = rng.uniform(0.05, 0.95, 3)
        cy, cx = rng.uniform(0.1, 0.9, 2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hy, hx = rng.uniform(0.05, 0.25, 2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


def synth_lowlight(n: int, size: int = 64, seed: int = 0, noise_sigma: float = 0.0,
                   illumination_range: tuple[float, float] = (0.05, 0.5)) -> list[Sample]:
    """``n`` (input, reference, illumination) triples; input = reference * illumination + noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = illumination_range
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = _clean_image(rng, size)
        illum = lo + (hi - lo) * _smooth_field(rng, size)
        dark = clean * illum[..., None]
        if noise_sigma > 0:
            dark = dark + rng.normal(0.0, noise_sigma, dark.shape)
        out.append(Sample(f"synth_{i:04d}", np.clip(dark, 0.0, 1.0), clean, illum))
    return out
