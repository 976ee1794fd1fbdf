"""Seeded synthetic image generator (Gaussian blobs over smooth gradients).

Ships in-repo so training and sweep runs need no external datasets. Images
are smooth and low-frequency dominated, which makes truncated patch spectra
and coarse-to-fine quantization behave like they do on natural images.
"""

from __future__ import annotations

import numpy as np


def make_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) image in [0, 1]: gradient base + blobs + texture."""
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        gx, gy = rng.normal(0, 0.25, size=2)
        img[:, :, c] = 0.5 + gx * (x - 0.5) + gy * (y - 0.5)
    n_blobs = int(rng.integers(2, 6))
    for _ in range(n_blobs):
        cx, cy = rng.random(2)
        sigma = rng.uniform(0.08, 0.3)
        amp = rng.uniform(-0.5, 0.5, size=3)
        bump = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma**2))
        img += bump[:, :, None] * amp[None, None, :]
    if rng.random() < 0.5:
        fx, fy = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.08 * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
        img += wave[:, :, None] * rng.uniform(0.3, 1.0, size=3)[None, None, :]
    return np.clip(img, 0.0, 1.0)


def make_images(count: int, size: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Deterministic list of images; image i depends only on (seed, i)."""
    return [make_image(size, np.random.default_rng([seed, i])) for i in range(count)]
