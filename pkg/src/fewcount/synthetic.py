"""Synthetic colony plates: bright Gaussian blobs on a dark noisy background."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import BoundingBox, ImageSample, write_annotation, write_image


def dot_image(
    rng: np.random.Generator,
    sample_id: str = "synthetic",
    size: int = 128,
    n_dots: tuple[int, int] = (10, 30),
    blob_sigma: tuple[float, float] = (1.5, 2.5),
    margin: int = 4,
) -> ImageSample:
    n = int(rng.integers(n_dots[0], n_dots[1] + 1))
    xs = rng.uniform(margin, size - margin, n)
    ys = rng.uniform(margin, size - margin, n)
    sig = rng.uniform(*blob_sigma, n)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.zeros((size, size))
    for x, y, s in zip(xs, ys, sig):
        img += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
    tint = rng.uniform(0.7, 1.0, 3)
    base = 30 + rng.normal(0, 3, (3, size, size))
    pixels = np.clip(base + 200 * tint[:, None, None] * np.minimum(img, 1.0)[None], 0, 255).astype(np.uint8)
    boxes = []
    for x, y, s in zip(xs, ys, sig):
        half = 2.5 * s
        x0, y0 = max(x - half, 0.0), max(y - half, 0.0)
        x1, y1 = min(x + half, float(size)), min(y + half, float(size))
        boxes.append(BoundingBox(x0, y0, y1 - y0, x1 - x0))
    return ImageSample(sample_id, pixels, np.stack([xs, ys], axis=1), boxes)


def dot_images(n: int, seed: int = 0, **kwargs) -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    return [dot_image(rng, f"syn{i:03d}", **kwargs) for i in range(n)]


def write_dataset(root, samples) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / f"{s.id}.png", s.pixels)
        write_annotation(root / f"{s.id}.json", s.dots, s.boxes)
