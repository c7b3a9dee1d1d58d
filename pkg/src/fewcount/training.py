"""Loss, Adam, metrics, early stopping, single-run training and k-fold cross-validation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import BoundingBox, ImageSample, NormStats, compute_norm_stats, gt_density, make_folds, normalize, select_exemplars
from .model import Checkpoint, Model, ModelConfig, build_model, count, load_state, snapshot
from .nn import functional as F
from .nn.tensor import Tensor

log = logging.getLogger(__name__)

mse_loss = F.mse_loss


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 1
    max_epochs: int = 1500
    es_patience: int = 200
    es_min_rel_improve: float = 0.01
    k_folds: int = 5
    seed: int = 0
    n_exemplars: int = 3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        bad = []
        if not self.lr >= 0:
            bad.append("lr")
        if self.batch < 1:
            bad.append("batch")
        if self.max_epochs < 1:
            bad.append("max_epochs")
        if self.es_patience < 1:
            bad.append("es_patience")
        if not 0 < self.es_min_rel_improve < 1:
            bad.append("es_min_rel_improve")
        if self.k_folds < 2:
            bad.append("k_folds")
        if self.n_exemplars < 1:
            bad.append("n_exemplars")
        if bad:
            from .model import ConfigError

            raise ConfigError(f"invalid train config values: {', '.join(bad)}", bad)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        from .model import ConfigError

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}", unknown)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}", sorted(d)) from None


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"Adam state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mnae: float
    per_sample: list[tuple[str, float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": len(self.per_sample),
            "mae": self.mae,
            "rmse": self.rmse,
            "mnae": self.mnae,
            "per_sample": [
                {"id": sid, "predicted": yh, "actual": y, "normalized_error": e} for sid, yh, y, e in self.per_sample
            ],
        }


def metrics(pairs: Sequence[tuple[float, float]], ids: Sequence[str] | None = None) -> MetricsReport:
    """MAE, RMSE and MNAE of (predicted, actual) count pairs."""
    if len(pairs) == 0:
        raise ValueError("metrics need at least one (predicted, actual) pair")
    pred = np.array([p for p, _ in pairs], dtype=np.float64)
    true = np.array([t for _, t in pairs], dtype=np.float64)
    if np.any(true <= 0):
        raise ValueError("MNAE is undefined for a ground-truth count of zero")
    err = np.abs(pred - true)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    per = [(sid, float(p), float(t), float(e / t)) for sid, p, t, e in zip(ids, pred, true, err)]
    return MetricsReport(float(err.mean()), float(np.sqrt((err**2).mean())), float((err / true).mean()), per)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def epochs_since_improvement(history: Sequence[float], min_rel_improve: float) -> int:
    ref = history[0]
    last = 0
    for t, v in enumerate(history[1:], start=1):
        # "at least" is inclusive; the slack absorbs float rounding of ref*(1-r)
        if v <= ref * (1.0 - min_rel_improve) + 1e-12 * abs(ref):
            ref, last = v, t
    return len(history) - 1 - last


def early_stop(history: Sequence[float], patience: int = 200, min_rel_improve: float = 0.01) -> str:
    """``"stop"`` once the monitored value has gone ``patience`` epochs without a
    relative improvement of at least ``min_rel_improve``, else ``"continue"``."""
    if not history:
        raise ValueError("early stopping needs at least one recorded value")
    return "stop" if epochs_since_improvement(history, min_rel_improve) >= patience else "continue"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    """A sample ready for the model: normalised image, target map, fixed exemplars."""

    id: str
    image: np.ndarray
    target: np.ndarray
    count: float
    exemplars: list[BoundingBox]


def exemplar_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode())])


def prepare(
    samples: Sequence[ImageSample],
    stats: NormStats,
    n_exemplars: int,
    seed: int,
    dtype=np.float32,
) -> list[Prepared]:
    out = []
    for s in samples:
        target = gt_density(s.dots, s.height, s.width).astype(dtype)
        boxes = select_exemplars(s, n_exemplars, exemplar_rng(seed, s.id))
        out.append(Prepared(s.id, normalize(s, stats, dtype), target, float(len(s.dots)), boxes))
    return out


def predict_count(model: Model, item: Prepared) -> float:
    return count(model.forward(item.image, item.exemplars, training=False))


def dead_start(model: Model, items: Sequence[Prepared]) -> bool:
    """True when the density map is zero everywhere on every item.

    The heads end in a ReLU, so such a model receives no gradient at all and
    training cannot move it.
    """
    return all(not model.forward(it.image, it.exemplars, training=False).data.any() for it in items)


def live_model(cfg: ModelConfig, items: Sequence[Prepared], max_tries: int = 16, dtype=np.float32) -> Model:
    """Build ``cfg`` with seeds ``cfg.seed``, ``cfg.seed + 1``, ... until the start is not dead.

    The check looks only at the initial forward pass, never at training results.
    """
    for offset in range(max_tries):
        model = build_model(dataclasses.replace(cfg, seed=cfg.seed + offset), dtype)
        if not dead_start(model, items):
            if offset:
                first, chosen = cfg.seed, cfg.seed + offset
                log.warning("seeds %d..%d give an all-zero initial output; using seed %d", first, chosen - 1, chosen)
            return model
    raise TrainingDiverged(f"every seed in {cfg.seed}..{cfg.seed + max_tries - 1} starts with an all-zero output")


def evaluate(model: Model, items: Sequence[Prepared]) -> MetricsReport:
    pairs = [(predict_count(model, it), it.count) for it in items]
    return metrics(pairs, [it.id for it in items])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: MetricsReport
    best_epoch: int
    loss_history: list[float]
    val_history: list[float]
    stopped_early: bool
    seconds: float


EpochCallback = Callable[[int, float, MetricsReport], bool]


def train_one(
    model: Model,
    train_samples: Sequence,
    val_samples: Sequence,
    tcfg: TrainConfig,
    stats: NormStats | None = None,
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Train with batch-``tcfg.batch`` Adam on the MSE to the ground-truth density.

    Samples are :class:`ImageSample` (normalised with ``stats``, computed from
    the training samples when omitted) or already :class:`Prepared` items.
    Validation MNAE is computed after every epoch; the best one is kept and
    drives early stopping. ``on_epoch(epoch, mean_loss, val_report)``
    returning True ends training after that epoch.
    """
    if not train_samples or not val_samples:
        raise ValueError("training and validation sets must both be non-empty")
    if not isinstance(train_samples[0], Prepared):
        stats = stats or compute_norm_stats(train_samples)
        train_items = prepare(train_samples, stats, tcfg.n_exemplars, tcfg.seed, model.dtype)
        val_items = prepare(val_samples, stats, tcfg.n_exemplars, tcfg.seed, model.dtype)
    else:
        train_items, val_items = list(train_samples), list(val_samples)

    started = time.perf_counter()
    order_rng = np.random.default_rng(tcfg.seed)
    drop_rng = np.random.default_rng([tcfg.seed, 1])
    trainable = model.trainable_params()
    model.set_requires_grad(True)
    adam = AdamState()
    loss_history: list[float] = []
    val_history: list[float] = []
    best: tuple[float, int, Checkpoint, MetricsReport] | None = None
    stopped_early = False

    for epoch in range(1, tcfg.max_epochs + 1):
        losses = []
        order = order_rng.permutation(len(train_items))
        for start in range(0, len(order), tcfg.batch):
            chunk = order[start : start + tcfg.batch]
            grads: dict[str, np.ndarray] = {}
            for i in chunk:
                item = train_items[i]
                model.zero_grad()
                pred = model.forward(item.image, item.exemplars, training=True, rng=drop_rng)
                loss = mse_loss(pred, Tensor(item.target))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at epoch {epoch} on sample {item.id}")
                loss.backward()
                losses.append(value)
                for name, t in trainable.items():
                    if t.grad is not None:
                        grads[name] = grads[name] + t.grad if name in grads else t.grad
            if len(chunk) > 1:
                grads = {n: g / len(chunk) for n, g in grads.items()}
            adam_step({n: t.data for n, t in trainable.items()}, grads, adam, tcfg.lr, tcfg.betas, tcfg.eps)
        model.zero_grad()
        loss_history.append(float(np.mean(losses)))
        if epoch == 1 and not any(np.any(m) for m in adam.m.values()):
            log.warning("no parameter received a gradient in the first epoch; the output ReLU may be dead everywhere")

        report = evaluate(model, val_items)
        val_history.append(report.mnae)
        if best is None or report.mnae < best[0]:
            best = (report.mnae, epoch, snapshot(model, epoch=epoch, best_val_mnae=report.mnae), report)
        log.info("epoch %d loss %.6g val MNAE %.4f", epoch, loss_history[-1], report.mnae)
        if on_epoch is not None and on_epoch(epoch, loss_history[-1], report):
            break
        if early_stop(val_history, tcfg.es_patience, tcfg.es_min_rel_improve) == "stop":
            stopped_early = True
            break

    _, best_epoch, ckpt, report = best
    return TrainResult(ckpt, report, best_epoch, loss_history, val_history, stopped_early, time.perf_counter() - started)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    stats: NormStats
    train_report: MetricsReport
    val_report: MetricsReport
    best_epoch: int
    checkpoint: Checkpoint

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "train_ids": self.train_ids,
            "val_ids": self.val_ids,
            "norm_stats": self.stats.to_dict(),
            "best_epoch": self.best_epoch,
            "train": self.train_report.to_dict(),
            "validation": self.val_report.to_dict(),
        }


@dataclass
class CrossValResult:
    folds: list[FoldResult]

    def _column(self, split: str, metric: str) -> np.ndarray:
        attr = "train_report" if split == "train" else "val_report"
        return np.array([getattr(getattr(f, attr), metric) for f in self.folds])

    @property
    def mean_val_mnae(self) -> float:
        return float(self._column("validation", "mnae").mean())

    @property
    def std_val_mnae(self) -> float:
        return float(self._column("validation", "mnae").std(ddof=1))

    def summary(self) -> dict:
        """Per-fold train/validation MAE, RMSE, MNAE with their mean and std (ddof=1)."""
        rows = []
        for f in self.folds:
            rows.append(
                {
                    "fold": f.fold + 1,
                    "train": {m: getattr(f.train_report, m) for m in ("mae", "rmse", "mnae")},
                    "validation": {m: getattr(f.val_report, m) for m in ("mae", "rmse", "mnae")},
                }
            )
        agg = {}
        for stat, fn in (("mean", np.mean), ("std", lambda a: np.std(a, ddof=1))):
            agg[stat] = {
                split: {m: float(fn(self._column(split, m))) for m in ("mae", "rmse", "mnae")}
                for split in ("train", "validation")
            }
        return {"k": len(self.folds), "folds": rows, **agg}


def fold_norm_stats(samples: Sequence[ImageSample], val_ids: set[str]) -> NormStats:
    """Pixel statistics from the training folds only."""
    return compute_norm_stats([s for s in samples if s.id not in val_ids])


def _run_fold(args) -> FoldResult:
    samples, fold, val_ids, model_cfg, tcfg = args
    val_ids = set(val_ids)
    stats = fold_norm_stats(samples, val_ids)
    train = [s for s in samples if s.id not in val_ids]
    val = [s for s in samples if s.id in val_ids]
    fold_tcfg = dataclasses.replace(tcfg, seed=tcfg.seed + fold)
    train_items = prepare(train, stats, tcfg.n_exemplars, tcfg.seed, np.float32)
    val_items = prepare(val, stats, tcfg.n_exemplars, tcfg.seed, np.float32)
    model = live_model(dataclasses.replace(model_cfg, seed=model_cfg.seed + fold), train_items)
    result = train_one(model, train_items, val_items, fold_tcfg)
    load_state(model, result.checkpoint)
    return FoldResult(
        fold,
        sorted(s.id for s in train),
        sorted(val_ids),
        stats,
        evaluate(model, train_items),
        result.report,
        result.best_epoch,
        result.checkpoint,
    )


def crossval(
    samples: Sequence[ImageSample],
    k: int,
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    jobs: int = 1,
) -> CrossValResult:
    """k-fold cross-validation; each fold normalises with its own training-fold statistics."""
    folds = make_folds(samples, k, tcfg.seed)
    tasks = [(list(samples), f, folds.fold_ids(f), model_cfg, tcfg) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    return CrossValResult(results)
