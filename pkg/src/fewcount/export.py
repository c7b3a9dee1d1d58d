"""Density-map files: the raw float grid and the two PNG renderings."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

GRID_MAGIC = "FEWCOUNT-DENSITY"
GRID_VERSION = 1


class GridFormatError(ValueError):
    pass


def write_density_grid(path, density: np.ndarray) -> None:
    """One ASCII header line ``magic version H W`` then row-major little-endian float32."""
    grid = np.ascontiguousarray(density, dtype="<f4")
    if grid.ndim != 2:
        raise ValueError(f"density grid must be 2-D, got shape {grid.shape}")
    H, W = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"{GRID_MAGIC} {GRID_VERSION} {H} {W}\n".encode("ascii"))
        fh.write(grid.tobytes())


def read_density_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if end < 0:
        raise GridFormatError(f"{path}: missing header line")
    parts = data[:end].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != GRID_MAGIC:
        raise GridFormatError(f"{path}: not a density grid")
    if int(parts[1]) != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported grid version {parts[1]}")
    H, W = int(parts[2]), int(parts[3])
    body = data[end + 1 :]
    if len(body) != 4 * H * W:
        raise GridFormatError(f"{path}: expected {4 * H * W} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float32)


def density_to_gray(density: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map renders black."""
    d = np.asarray(density, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    if hi <= lo:
        return np.zeros(d.shape, dtype=np.uint8)
    return np.round(255.0 * (d - lo) / (hi - lo)).astype(np.uint8)


def save_density_png(path, density: np.ndarray) -> None:
    Image.fromarray(density_to_gray(density), mode="L").save(path)


def _heat(gray: np.ndarray) -> np.ndarray:
    # black -> red -> yellow -> white
    g = gray.astype(np.float64) / 255.0
    rgb = np.stack([np.clip(3 * g, 0, 1), np.clip(3 * g - 1, 0, 1), np.clip(3 * g - 2, 0, 1)], axis=-1)
    return (255 * rgb).astype(np.uint8)


def save_overlay_png(
    path,
    pixels: np.ndarray,
    density: np.ndarray,
    boxes: Sequence[Sequence[float]],
    label: str | None = None,
) -> None:
    """Input image with the exemplar boxes drawn, next to a heat-map panel of the density."""
    img = Image.fromarray(np.ascontiguousarray(np.asarray(pixels).transpose(1, 2, 0)).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for x, y, h, w in boxes:
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=(0, 255, 0), width=2)
    heat = Image.fromarray(_heat(density_to_gray(density)))
    if heat.size != img.size:
        heat = heat.resize(img.size, Image.BILINEAR)
    canvas = Image.new("RGB", (img.width * 2, img.height))
    canvas.paste(img, (0, 0))
    canvas.paste(heat, (img.width, 0))
    if label:
        ImageDraw.Draw(canvas).text((img.width + 4, 4), label, fill=(255, 255, 255))
    canvas.save(path)
