"""Procedural 10-class shapes corpus used as the offline desk-scale benchmark.

Every image is rendered from a seed, so the corpus is reproducible without
shipping binary data. Shapes are drawn on a 4x supersampled grid and box
filtered down, giving anti-aliased 28x28 grayscale images.
"""

from __future__ import annotations

import numpy as np

from .core import LabeledDataset, derive_seed

CLASS_NAMES = (
    "disk", "ring", "square", "frame", "triangle",
    "plus", "cross", "bars", "diamond", "tee",
)
_SS = 4
NOISE = 0.08
BACKGROUND = 0.3


def _grid(size: int, cx: float, cy: float, angle: float):
    coords = (np.arange(size * _SS) + 0.5) / _SS
    x, y = np.meshgrid(coords - cx, coords - cy)
    c, s = np.cos(angle), np.sin(angle)
    return c * x + s * y, -s * x + c * y


def _mask(kind: int, u: np.ndarray, v: np.ndarray, r: float, t: float) -> np.ndarray:
    rad = np.hypot(u, v)
    au, av = np.abs(u), np.abs(v)
    if kind == 0:
        return rad <= r
    if kind == 1:
        return (rad <= r) & (rad >= r - t)
    if kind == 2:
        return (au <= 0.8 * r) & (av <= 0.8 * r)
    if kind == 3:
        outer = (au <= 0.85 * r) & (av <= 0.85 * r)
        inner = (au <= 0.85 * r - t) & (av <= 0.85 * r - t)
        return outer & ~inner
    if kind == 4:
        # upward triangle inscribed in radius r
        h = 1.5 * r
        top = -r
        return (v >= top) & (v <= top + h) & (au <= (v - top) / h * 0.5 * r * np.sqrt(3))
    if kind == 5:
        return ((au <= t / 2) & (av <= r)) | ((av <= t / 2) & (au <= r))
    if kind == 6:
        d1 = np.abs(u - v) / np.sqrt(2)
        d2 = np.abs(u + v) / np.sqrt(2)
        return ((d1 <= t / 2) | (d2 <= t / 2)) & (au <= 0.75 * r) & (av <= 0.75 * r)
    if kind == 7:
        return (au <= r) & ((np.abs(v - r / 2) <= t / 2) | (np.abs(v + r / 2) <= t / 2))
    if kind == 8:
        return au + av <= 1.1 * r
    if kind == 9:
        top = -0.7 * r
        return ((v >= top) & (v <= top + t) & (au <= 0.8 * r)) | ((au <= t / 2) & (v >= top) & (v <= r))
    raise ValueError(f"unknown shape kind {kind}")


def render_shape(kind: int, rng: np.random.Generator, size: int = 28, noise: float = NOISE,
                 background: float = BACKGROUND) -> np.ndarray:
    r = rng.uniform(0.2, 0.38) * size
    t = rng.uniform(0.08, 0.16) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    # wide enough that plus/cross and square/diamond overlap near 22.5 degrees
    angle = rng.uniform(-0.5, 0.5)
    u, v = _grid(size, cx, cy, angle)
    fine = _mask(kind, u, v, r, t).astype(np.float64)
    img = fine.reshape(size, _SS, size, _SS).mean(axis=(1, 3))
    fg = rng.uniform(0.45, 1.0)
    bg = rng.uniform(0.0, background)
    img = bg + (fg - bg) * img
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_shapes_dataset(n_per_class: int = 400, seed: int = 0, size: int = 28, noise: float = NOISE,
                        background: float = BACKGROUND) -> LabeledDataset:
    """Render ``n_per_class`` images for each of the ten shape classes.

    Samples are interleaved by class so that ids follow rendering order.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(derive_seed(seed, "shapes"))
    k = len(CLASS_NAMES)
    images = np.empty((n_per_class * k, 1, size, size), dtype=np.float32)
    labels = np.tile(np.arange(k), n_per_class)
    for i, c in enumerate(labels):
        images[i, 0] = render_shape(int(c), rng, size, noise, background)
    return LabeledDataset(images, labels, np.arange(len(labels)), k, "shapes")
