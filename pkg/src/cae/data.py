"""Seeded synthetic texture corpus and random-crop batching."""

from __future__ import annotations

import numpy as np

from .model import as_chw
from .tensor import Rng


def synthetic_texture(rng: Rng, height: int = 64, width: int = 64, bands: int = 4) -> np.ndarray:
    """HxWx3 uint8 image: white noise shaped by oriented band-pass filters.

    Each band has a random orientation and radial frequency; a 1/f
    component adds smooth large-scale structure. Colour comes from a random
    3x3 mixing of independent fields.
    """
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.hypot(fx, fy)
    angle = np.arctan2(fy, fx)
    fields = []
    for _ in range(3):
        spectrum = np.zeros((height, width))
        for _ in range(bands):
            theta = rng.uniform((), 0, np.pi)
            f0 = rng.uniform((), 0.02, 0.12)
            width_f = 0.25 * f0 + 0.01
            d_ang = np.angle(np.exp(2j * (angle - theta))) / 2
            spectrum += rng.uniform((), 0.5, 1.5) * np.exp(
                -((radius - f0) ** 2) / (2 * width_f ** 2) - d_ang ** 2 / (2 * 0.3 ** 2))
        spectrum += 0.05 / np.maximum(radius, 1.0 / max(height, width))
        noise = np.fft.fft2(rng.normal((height, width)))
        field = np.real(np.fft.ifft2(noise * spectrum))
        fields.append((field - field.mean()) / (field.std() + 1e-12))
    stack = np.stack(fields, axis=-1)
    mix = rng.normal((3, 3)) * 0.5 + np.eye(3)
    img = stack @ mix.T
    img = 128.0 + 48.0 * img / (img.std() + 1e-12) + rng.uniform((3,), -30, 30)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synthetic_corpus(n: int, seed: int = 0, height: int = 64, width: int = 64) -> list[np.ndarray]:
    return [synthetic_texture(Rng(seed, 10_000 + i), height, width) for i in range(n)]


def sample_batch(images, rng: Rng, batch_size: int, crop: int) -> np.ndarray:
    """Random crops as an NCHW float64 batch; images are HxWx3 or 3xHxW."""
    out = np.empty((batch_size, 3, crop, crop))
    for b in range(batch_size):
        img = as_chw(images[int(rng.integers(0, len(images)))])
        h, w = img.shape[1:]
        if h < crop or w < crop:
            raise ValueError(f"image {(h, w)} smaller than crop {crop}")
        i = int(rng.integers(0, h - crop + 1))
        j = int(rng.integers(0, w - crop + 1))
        out[b] = img[:, i:i + crop, j:j + crop]
    return out
