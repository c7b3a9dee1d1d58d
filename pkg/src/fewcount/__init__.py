"""Few-shot, exemplar-driven density-map counting of bacterial colonies."""

__version__ = "0.1.0"

from ._jit import backend  # noqa: E402
from .dataset import BoundingBox, ImageSample, NormStats, compute_norm_stats, gt_density, load_dataset  # noqa: E402
from .model import Model, ModelConfig, build_model, count, load_checkpoint, save_checkpoint  # noqa: E402
from .training import MetricsReport, TrainConfig, crossval, live_model, metrics, prepare, train_one  # noqa: E402

__all__ = [
    "BoundingBox",
    "ImageSample",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "NormStats",
    "TrainConfig",
    "backend",
    "build_model",
    "compute_norm_stats",
    "count",
    "crossval",
    "gt_density",
    "live_model",
    "load_checkpoint",
    "load_dataset",
    "metrics",
    "prepare",
    "save_checkpoint",
    "train_one",
]
