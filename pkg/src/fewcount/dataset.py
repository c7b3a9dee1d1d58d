"""Images, dot/box annotations, ground-truth density maps and data splits.

A dataset directory holds ``<id>.png`` (or ``.jpg``/``.jpeg``) images, each
with an ``<id>.json`` sidecar::

    {"dots": [[x, y], ...], "boxes": [[x, y, h, w], ...]}

Coordinates are pixels, origin top-left, y pointing down.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .nn import kernels


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SINGLE_DOT_WINDOW = 15


class DatasetError(ValueError):
    """A sample failed to load or validate."""

    def __init__(self, sample_id: str, message: str):
        super().__init__(f"{sample_id}: {message}")
        self.sample_id = sample_id


class DegenerateStatsError(ValueError):
    def __init__(self, mean: np.ndarray, std: np.ndarray):
        super().__init__(f"pixel standard deviation is zero in some channel (mean={mean}, std={std})")
        self.mean = mean
        self.std = std


class BoundingBox(NamedTuple):
    x: float
    y: float
    h: float
    w: float


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # (3, H, W) uint8
    dots: np.ndarray  # (N, 2) float, columns x, y
    boxes: list[BoundingBox] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def count(self) -> int:
        return len(self.dots)

    def validate(self, require_dots: bool = False) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DatasetError(self.id, f"expected a 3-channel image, got shape {self.pixels.shape}")
        H, W = self.pixels.shape[1:]
        if H <= 0 or W <= 0:
            raise DatasetError(self.id, "empty image")
        if self.pixels.min(initial=0) < 0 or self.pixels.max(initial=0) > 255:
            raise DatasetError(self.id, "pixel values outside [0, 255]")
        if require_dots and len(self.dots) == 0:
            raise DatasetError(self.id, "no dot annotations")
        if len(self.dots):
            xs, ys = self.dots[:, 0], self.dots[:, 1]
            bad = (xs < 0) | (xs > W) | (ys < 0) | (ys > H)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DatasetError(self.id, f"dot {i} at {tuple(self.dots[i])} outside {W}x{H} image")
        for i, b in enumerate(self.boxes):
            try:
                check_box(b, H, W)
            except ValueError as exc:
                raise DatasetError(self.id, f"box {i}: {exc}") from None


def check_box(box: Sequence[float], H: int, W: int) -> None:
    x, y, h, w = box
    if not (h > 0 and w > 0):
        raise ValueError(f"{tuple(box)} has non-positive size")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"{tuple(box)} extends outside the {W}x{H} image")


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def read_annotation(path: Path) -> tuple[np.ndarray, list[BoundingBox]]:
    doc = json.loads(Path(path).read_text())
    dots = np.asarray(doc.get("dots", []), dtype=np.float64).reshape(-1, 2)
    boxes = [BoundingBox(*map(float, b)) for b in doc.get("boxes", [])]
    return dots, boxes


def write_annotation(path: Path, dots: Iterable, boxes: Iterable) -> None:
    doc = {
        "dots": [[float(x), float(y)] for x, y in dots],
        "boxes": [[float(v) for v in b] for b in boxes],
    }
    Path(path).write_text(json.dumps(doc))


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)).astype(np.uint8)).save(path)


def _image_files(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_sample(image_path: Path) -> ImageSample:
    image_path = Path(image_path)
    sid = image_path.stem
    ann = image_path.with_suffix(".json")
    if not ann.exists():
        raise DatasetError(sid, f"missing annotation file {ann.name}")
    try:
        dots, boxes = read_annotation(ann)
    except (ValueError, TypeError) as exc:
        raise DatasetError(sid, f"unreadable annotation: {exc}") from None
    sample = ImageSample(sid, read_image(image_path), dots, boxes)
    sample.validate()
    return sample


def scan_dataset(root) -> list[tuple[str, ImageSample | DatasetError]]:
    """Load every sample under ``root``, collecting failures instead of raising."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    results = []
    for path in _image_files(root):
        try:
            results.append((path.stem, load_sample(path)))
        except DatasetError as exc:
            results.append((path.stem, exc))
    ids = [sid for sid, _ in results]
    if len(set(ids)) != len(ids):
        dup = next(s for s in ids if ids.count(s) > 1)
        results.append((dup, DatasetError(dup, "several images share this id")))
    return results


def load_dataset(root) -> list[ImageSample]:
    """All samples under ``root`` sorted by id; raises on the first invalid one."""
    results = scan_dataset(root)
    if not results:
        warnings.warn(f"no images found in {root}", stacklevel=2)
    samples = []
    for _, item in results:
        if isinstance(item, DatasetError):
            raise item
        samples.append(item)
    return samples


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    fold_assignments: dict[str, int]
    k: int

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_assignments.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]


def split_train_test(samples: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    n = len(samples)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = [samples[i] for i in sorted(order[:n_train])]
    test = [samples[i] for i in sorted(order[n_train:])]
    return train, test


def _sample_id(s) -> str:
    return s if isinstance(s, str) else s.id


def make_folds(train: Sequence, k: int, seed: int) -> FoldSplit:
    if k < 2:
        raise ValueError(f"k-fold cross-validation needs k >= 2, got {k}")
    if k > len(train):
        raise ValueError(f"cannot make {k} folds from {len(train)} samples")
    ids = sorted(_sample_id(s) for s in train)
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit({ids[j]: pos % k for pos, j in enumerate(order)}, k)


def write_split_file(path, train: Sequence, test: Sequence, folds: FoldSplit | None, seed: int, ratio: float) -> None:
    entries = {}
    for s in train:
        sid = _sample_id(s)
        entries[sid] = {"set": "train", "fold": folds.fold_assignments[sid] if folds else None}
    for s in test:
        entries[_sample_id(s)] = {"set": "test", "fold": None}
    doc = {"seed": seed, "ratio": ratio, "k": folds.k if folds else None, "samples": dict(sorted(entries.items()))}
    Path(path).write_text(json.dumps(doc, indent=2))


def read_split_file(path) -> tuple[list[str], list[str], FoldSplit | None]:
    doc = json.loads(Path(path).read_text())
    entries = doc["samples"]
    train = sorted(s for s, e in entries.items() if e["set"] == "train")
    test = sorted(s for s, e in entries.items() if e["set"] == "test")
    folds = None
    if doc.get("k"):
        folds = FoldSplit({s: int(entries[s]["fold"]) for s in train}, int(doc["k"]))
    return train, test, folds


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("NormStats needs three channel values")
        if not all(s > 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")

    @property
    def variance(self) -> tuple[float, float, float]:
        return tuple(s * s for s in self.std)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(tuple(map(float, d["mean"])), tuple(map(float, d["std"])))


def compute_norm_stats(samples: Sequence[ImageSample]) -> NormStats:
    """Per-channel mean and population std over every pixel of every sample."""
    if not samples:
        raise ValueError("cannot compute pixel statistics of an empty sample list")
    total = np.zeros(3, dtype=np.int64)
    total_sq = np.zeros(3, dtype=np.int64)
    n = 0
    for s in samples:
        px = s.pixels.reshape(3, -1).astype(np.int64)
        total += px.sum(axis=1)
        total_sq += (px * px).sum(axis=1)
        n += px.shape[1]
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0)
    std = np.sqrt(var)
    if np.any(std == 0):
        raise DegenerateStatsError(mean, std)
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()))


def normalize(sample, stats: NormStats, dtype=np.float64) -> np.ndarray:
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(3, 1, 1)
    return ((pixels - mean) / std).astype(dtype, copy=False)


def denormalize(grid: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(3, 1, 1)
    return grid * std + mean


# ---------------------------------------------------------------------------
# ground-truth density
# ---------------------------------------------------------------------------


def kernel_window(dots: np.ndarray) -> int:
    """Gaussian window from the mean nearest-neighbour distance, as the nearest odd int >= 3."""
    if len(dots) < 2:
        return SINGLE_DOT_WINDOW
    dist, _ = cKDTree(dots).query(dots, k=2)
    mean_nn = float(dist[:, 1].mean())
    # ties (even integers) round up: 40 -> 41
    return max(2 * int(math.floor(mean_nn / 2.0)) + 1, 3)


def gt_density(dots, H: int, W: int) -> np.ndarray:
    """Adaptive-Gaussian density map whose sum equals the number of dots.

    Each dot gets one Gaussian of side ``kernel_window(dots)`` and
    ``sigma = window / 4`` centred on its pixel; the stamp is renormalised to
    unit mass after clipping at the image border.
    """
    dots = np.asarray(dots, dtype=np.float64).reshape(-1, 2)
    if len(dots) == 0:
        raise ValueError("ground-truth density needs at least one dot")
    xs, ys = dots[:, 0], dots[:, 1]
    if np.any((xs < 0) | (xs > W) | (ys < 0) | (ys > H)):
        raise ValueError(f"dots must lie inside the {W}x{H} image")
    window = kernel_window(dots)
    cols = np.minimum(np.floor(xs).astype(np.int64), W - 1)
    rows = np.minimum(np.floor(ys).astype(np.int64), H - 1)
    return kernels.stamp_gaussians(rows, cols, H, W, window, window / 4.0)


def select_exemplars(sample: ImageSample, k: int, rng: np.random.Generator) -> list[BoundingBox]:
    """Draw ``k`` annotated boxes uniformly without replacement (all of them if fewer)."""
    if not sample.boxes:
        raise DatasetError(sample.id, "no annotated boxes to use as exemplars")
    n = min(k, len(sample.boxes))
    idx = sorted(rng.choice(len(sample.boxes), size=n, replace=False).tolist())
    return [sample.boxes[i] for i in idx]
