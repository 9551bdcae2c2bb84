"""Deterministic synthetic test scenes for the restoration experiments."""

from __future__ import annotations

import numpy as np


def scene(size: int = 128, channels: int = 3, seed: int = 0) -> np.ndarray:
    """Smooth shading, a few soft-edged shapes and one textured patch.

    Values lie in [0, 1]; shape (channels, size, size).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((channels, size, size))
    base = rng.uniform(0.25, 0.6, size=channels)
    tilt = rng.uniform(-0.2, 0.2, size=(channels, 2))
    for c in range(channels):
        img[c] = base[c] + tilt[c, 0] * (xx - 0.5) + tilt[c, 1] * (yy - 0.5)
    for _ in range(4):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.08, 0.22)
        colour = rng.uniform(0.0, 1.0, size=channels)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        alpha = 1.0 / (1.0 + np.exp((d - r) * size / 1.5))
        shade = 0.85 + 0.15 * (1 - d / max(r, 1e-6)).clip(0, 1)
        img = img * (1 - alpha) + alpha * (colour[:, None, None] * shade)
    x0, y0 = rng.uniform(0.05, 0.55, size=2)
    w = 0.3
    patch = (xx > x0) & (xx < x0 + w) & (yy > y0) & (yy < y0 + w)
    freq = rng.uniform(5, 9)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy))
    img = np.where(patch, 0.6 * img + 0.4 * stripes, img)
    return np.clip(img, 0.0, 1.0)


def pink_texture(size: int, channels: int = 3, seed: int = 0, slope: float = 1.0) -> np.ndarray:
    """Zero-mean, unit-variance noise with a ``1/f**slope`` amplitude spectrum.

    Channels share 60% of a common field so colours stay correlated.
    """
    rng = np.random.default_rng(seed)
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    radius[0, 0] = 1.0
    fields = np.array([np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) / radius ** slope).real
                       for _ in range(channels)])
    out = 0.6 * fields.mean(axis=0, keepdims=True) + 0.4 * fields
    return (out - out.mean()) / out.std()


def textured_scene(size: int = 128, channels: int = 3, seed: int = 0,
                   texture: float = 0.1) -> np.ndarray:
    """:func:`scene` plus a natural-image-like ``1/f`` texture layer."""
    layer = pink_texture(size, channels, seed + 5)
    return np.clip(scene(size, channels, seed) + texture * layer, 0.0, 1.0)


def grating_scene(size: int = 64, channels: int = 3, seed: int = 0) -> np.ndarray:
    """:func:`scene` with each quadrant overlaid by a fine sinusoidal grating.

    Periods of 3 to 6 px and random orientations give regular texture
    that local smooth interpolation cannot reconstruct.
    """
    rng = np.random.default_rng(seed)
    base = scene(size, channels, seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = base.copy()
    h = size // 2
    for top, left in ((0, 0), (0, h), (h, 0), (h, h)):
        angle = rng.uniform(0, np.pi)
        period = rng.uniform(3, 6)
        grating = 0.5 + 0.5 * np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period)
        rows, cols = slice(top, top + h), slice(left, left + h)
        out[:, rows, cols] = 0.5 * base[:, rows, cols] + 0.5 * grating[rows, cols]
    return out


def add_noise(img: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)


def random_mask(shape: tuple[int, int], drop: float = 0.25, seed: int = 0) -> np.ndarray:
    """Binary mask with ``drop`` fraction of pixels removed (0 = missing)."""
    rng = np.random.default_rng(seed)
    return (rng.random(shape) >= drop).astype(np.float64)


def flash_pair(size: int = 64, seed: int = 0, noise: float = 0.08) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(flash, no_flash, clean_ambient) triple.

    The flash image is sharp and low-noise but with a flattened colour
    cast; the no-flash image has the true colours plus strong noise.
    """
    clean = scene(size, 3, seed)
    luminance = clean.mean(axis=0, keepdims=True)
    flash = np.clip(0.35 + 0.6 * luminance + 0.1 * (clean - luminance), 0, 1)
    flash = add_noise(flash, noise / 4, seed + 1)
    no_flash = add_noise(clean, noise, seed + 2)
    return flash, no_flash, clean
