"""Model configuration, parameter initialisation, forward pass and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import correlation as corr
from . import heads
from .nn.tensor import Tensor

VARIANTS = ("acfamnet", "pro")
INIT_STD = 0.01


class ConfigError(ValueError):
    def __init__(self, message: str, keys: Sequence[str] = ()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class ModelConfig:
    variant: str = "acfamnet"
    k: int = 256
    C: int = 256
    N: int = 4
    k_embed: int = 1024
    roi_out: tuple[int, int] = (3, 3)
    roi_mode: str = "align"
    scales: tuple[float, ...] = (1.0,)
    backbone_trainable: bool = True
    residual_similarity: bool = True
    dropout_p: float = 0.1
    leaky_slope: float = 0.01
    seed: int = 0

    @classmethod
    def acfamnet(cls, **overrides) -> ModelConfig:
        return cls(**{"variant": "acfamnet", "k": 256, **overrides})

    @classmethod
    def pro(cls, **overrides) -> ModelConfig:
        base = {"variant": "pro", "k": 128, "C": 256, "N": 4, "k_embed": 1024, "scales": (1.0, 0.9, 1.1)}
        return cls(**{**base, **overrides})

    def __post_init__(self):
        self.roi_out = tuple(int(v) for v in self.roi_out)
        self.scales = tuple(float(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        bad = []
        if self.variant not in VARIANTS:
            bad.append("variant")
        for name in ("k", "C", "N", "k_embed"):
            if int(getattr(self, name)) < 1:
                bad.append(name)
        if self.variant == "pro" and self.k_embed % 4:
            bad.append("k_embed")
        if len(self.roi_out) != 2 or min(self.roi_out) < 1:
            bad.append("roi_out")
        if self.roi_mode not in ("align", "pool"):
            bad.append("roi_mode")
        if not self.scales or min(self.scales) <= 0:
            bad.append("scales")
        if not 0.0 <= self.dropout_p < 1.0:
            bad.append("dropout_p")
        if bad:
            raise ConfigError(f"invalid model config values: {', '.join(sorted(set(bad)))}", sorted(set(bad)))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["roi_out"] = list(self.roi_out)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}", unknown)
        variant = d.get("variant", "acfamnet")
        try:
            if variant == "pro":
                return cls.pro(**d)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad model config: {exc}", sorted(d)) from None

    @property
    def head_config(self) -> heads.HeadConfig:
        return heads.HeadConfig(self.variant, self.k_embed, self.residual_similarity, self.leaky_slope)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable parameter and its shape, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {
        "backbone.conv.weight": (cfg.k, 3, 7, 7),
        "backbone.conv.bias": (cfg.k,),
        "backbone.bn.weight": (cfg.k,),
        "backbone.bn.bias": (cfg.k,),
    }
    if cfg.variant == "acfamnet":
        shapes.update(heads.acfamnet_head_shapes(len(cfg.scales)))
        return shapes
    c_in = cfg.k
    for j in range(cfg.N):
        p = f"rfe.{j}"
        shapes[f"{p}.proj.weight"] = (cfg.C, c_in, 1, 1)
        shapes[f"{p}.proj.bias"] = (cfg.C,)
        for ln in ("proj_ln", "fuse_ln", "out_ln"):
            shapes[f"{p}.{ln}.weight"] = (cfg.C,)
            shapes[f"{p}.{ln}.bias"] = (cfg.C,)
        shapes[f"{p}.fuse.scale"] = (1,)
        shapes[f"{p}.fuse.shift"] = (1,)
        for h in ("h1", "h2"):
            shapes[f"{p}.{h}.weight"] = (cfg.C, cfg.C, 3, 3)
            shapes[f"{p}.{h}.bias"] = (cfg.C,)
        c_in = cfg.C
    shapes.update(heads.pro_head_shapes(cfg.C, cfg.head_config))
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"backbone.bn.running_mean": (cfg.k,), "backbone.bn.running_var": (cfg.k,)}


def _is_norm_param(name: str) -> bool:
    return name.startswith("backbone.bn.") or "_ln." in name


class Model:
    """Parameters, batch-norm buffers and the forward pass of one configured model."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers

    @property
    def trainable(self) -> list[str]:
        names = list(self.params)
        if not self.cfg.backbone_trainable:
            names = [n for n in names if not n.startswith("backbone.")]
        return names

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: self.params[n] for n in self.trainable}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in their fixed order."""
        out = {n: t.data for n, t in self.params.items()}
        out.update(self.buffers)
        return out

    def set_requires_grad(self, enabled: bool) -> None:
        trainable = set(self.trainable)
        for n, t in self.params.items():
            t.requires_grad = enabled and n in trainable

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward(
        self,
        image,
        boxes: Sequence[Sequence[float]],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Normalised 3×H×W image plus K exemplar boxes (image coordinates) → H×W density."""
        if len(boxes) == 0:
            raise ValueError("at least one exemplar box is required")
        cfg = self.cfg
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        # a frozen backbone keeps its running statistics too
        bn_training = training and cfg.backbone_trainable
        f_q = corr.extract_query_feature(image, self.params, self.buffers, training=bn_training)
        if cfg.variant == "acfamnet":
            supports = corr.extract_support_features(f_q, boxes, cfg.roi_out, cfg.scales, cfg.roi_mode)
            return heads.acfamnet_head(corr.acfamnet_similarity(f_q, supports), self.params)
        enhanced, r = corr.rfe_stack(
            f_q,
            boxes,
            self.params,
            cfg.N,
            cfg.roi_out,
            cfg.scales,
            cfg.roi_mode,
            training=training,
            dropout_p=cfg.dropout_p,
            leaky_slope=cfg.leaky_slope,
            rng=rng,
        )
        return heads.pro_head(enhanced, r, self.params, cfg.head_config)

    __call__ = forward


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Gaussian(0, 0.01) weights and biases; norm scales 1, shifts 0; seeded by ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if _is_norm_param(name):
            value = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        else:
            value = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(value.astype(dtype), name=name)
    buffers = {
        "backbone.bn.running_mean": np.zeros(cfg.k, dtype=dtype),
        "backbone.bn.running_var": np.ones(cfg.k, dtype=dtype),
    }
    model = Model(cfg, params, buffers)
    model.set_requires_grad(True)
    return model


def count(density) -> float:
    values = density.data if isinstance(density, Tensor) else np.asarray(density)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("density map contains non-finite values")
    return float(values.sum(dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FEWCOUNT-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class VariantMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def snapshot(model: Model, **metadata) -> Checkpoint:
    arrays = {n: np.array(a, dtype="<f4", copy=True) for n, a in model.state_arrays().items()}
    return Checkpoint(dataclasses.replace(model.cfg), arrays, dict(metadata))


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single-file archive: magic, version, JSON header, then named little-endian float32 grids."""
    header = json.dumps({"config": ckpt.config.to_dict(), "metadata": ckpt.metadata}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        raw = name.encode()
        data = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def save_checkpoint(model: Model, path, **metadata) -> None:
    write_checkpoint(snapshot(model, **metadata), path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint file is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path} is not a fewcount checkpoint")
    version, header_len = reader.u32(), reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(reader.take(header_len).decode())
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    arrays = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode()
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name in arrays:
            raise CorruptCheckpointError(f"duplicate entry {name!r}")
        arrays[name] = arr
    if reader.pos != len(reader.data):
        raise CorruptCheckpointError("trailing bytes after the last entry")
    return Checkpoint(cfg, arrays, header.get("metadata", {}), version)


def model_from_checkpoint(ckpt: Checkpoint, expect_variant: str | None = None) -> Model:
    cfg = ckpt.config
    if expect_variant is not None and cfg.variant != expect_variant:
        raise VariantMismatchError(f"checkpoint holds a {cfg.variant!r} model, expected {expect_variant!r}")
    expected = {**parameter_shapes(cfg), **buffer_shapes(cfg)}
    missing = [n for n in expected if n not in ckpt.arrays]
    extra = [n for n in ckpt.arrays if n not in expected]
    if missing or extra:
        raise ShapeMismatchError(f"checkpoint entries do not match the config (missing {missing}, unexpected {extra})")
    for n, shape in expected.items():
        if ckpt.arrays[n].shape != tuple(shape):
            raise ShapeMismatchError(f"{n}: checkpoint shape {ckpt.arrays[n].shape}, config expects {tuple(shape)}")
    params = {n: Tensor(ckpt.arrays[n].copy(), name=n) for n in parameter_shapes(cfg)}
    buffers = {n: ckpt.arrays[n].copy() for n in buffer_shapes(cfg)}
    model = Model(cfg, params, buffers)
    model.set_requires_grad(True)
    return model


def load_checkpoint(path, expect_variant: str | None = None) -> Model:
    return model_from_checkpoint(read_checkpoint(path), expect_variant)


def load_state(model: Model, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into an existing model in place."""
    for n, t in model.params.items():
        t.data = ckpt.arrays[n].astype(t.dtype, copy=True)
    for n in model.buffers:
        model.buffers[n] = ckpt.arrays[n].astype(model.buffers[n].dtype, copy=True)
