"""Seeded synthetic grayscale images: smooth background, blobs and thin
membrane-like curves."""
from __future__ import annotations

import numpy as np

from ..masking import perlin_field


def synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.3 * perlin_field(size, size, octaves=2, base_freq=2, seed=int(rng.integers(2**31)))
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        ax, ay = rng.uniform(0.04, 0.18, 2)
        ang = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
        v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
        inside = (u / ax) ** 2 + (v / ay) ** 2
        img += rng.uniform(0.5, 1.5) * rng.choice([-1, 1]) * 0.5 * (1.0 - np.tanh(4.0 * (inside - 1.0)))
    for _ in range(int(rng.integers(1, 3))):
        amp, freq, phase, off = rng.uniform(0.05, 0.2), rng.uniform(1, 4), rng.uniform(0, 2 * np.pi), rng.uniform(0.2, 0.8)
        curve = off + amp * np.sin(2 * np.pi * freq * xx + phase)
        dist = np.abs(yy - curve)
        if rng.random() < 0.5:
            dist = np.abs(xx - (off + amp * np.sin(2 * np.pi * freq * yy + phase)))
        img += rng.uniform(0.8, 1.6) * np.exp(-((dist * size / 1.5) ** 2))
    img = img - img.mean()
    return img / (img.std() + 1e-8)


class SyntheticData:
    """Deterministic stream of batches: batch ``step`` depends only on
    ``(seed, step)``."""

    def __init__(self, size: int = 64, seed: int = 0, channels: int = 1):
        self.size = size
        self.seed = seed
        self.channels = channels

    def image(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index])
        img = synthetic_image(self.size, rng)
        return img[..., None] if self.channels == 1 else np.repeat(img[..., None], self.channels, axis=-1)

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        return np.stack([self.image(step * batch_size + i) for i in range(batch_size)])


class FixedData:
    """Always yields the same image(s)."""

    def __init__(self, images: np.ndarray):
        self.images = np.asarray(images)
        if self.images.ndim == 3:
            self.images = self.images[None]

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        reps = -(-batch_size // len(self.images))
        return np.concatenate([self.images] * reps)[:batch_size]
