"""Density regression heads. Both return an (H, W) map at twice the feature resolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .nn import functional as F
from .nn.functional import ShapeError
from .nn.tensor import Tensor

Params = Mapping[str, Tensor]

# (out_channels, kernel) for the five ACFamNet head layers
ACFAMNET_LAYERS = ((196, 7), (128, 5), (64, 3), (32, 1), (1, 1))


@dataclass(frozen=True)
class HeadConfig:
    variant: str = "acfamnet"
    k_embed: int = 1024
    residual_similarity: bool = True
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.variant not in ("acfamnet", "pro"):
            raise ValueError(f"unknown head variant {self.variant!r}")
        if self.variant == "pro" and (self.k_embed < 4 or self.k_embed % 4):
            raise ValueError(f"k_embed must be a positive multiple of 4, got {self.k_embed}")


def _check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{what} contains non-finite values")


def _conv(x: Tensor, params: Params, name: str) -> Tensor:
    return F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding="same")


def acfamnet_head(sim: Tensor, params: Params, prefix: str = "head") -> Tensor:
    """K×S×H_Q×W_Q similarity → density map, exemplars as a batch axis averaged at the end."""
    _check_finite(sim, "similarity map")
    if sim.ndim != 4:
        raise ShapeError(f"expected K×S×H×W similarity, got {sim.shape}")
    x = F.relu(_conv(sim, params, f"{prefix}.conv1"))
    x = F.bilinear_resize(x, 2.0)
    for i in range(2, len(ACFAMNET_LAYERS) + 1):
        x = F.relu(_conv(x, params, f"{prefix}.conv{i}"))
    density = F.mean(x, axis=0)  # (1, H, W)
    return F.reshape(density, density.shape[1:])


def pro_head(f_q: Tensor, r: Tensor, params: Params, cfg: HeadConfig, prefix: str = "head") -> Tensor:
    """Enhanced feature (C×H_Q×W_Q) and score map (K×1×H_Q×W_Q) → density map.

    Main path conv1 (k_embed, 7×7) → upsample → conv2 (k_embed/2, 5×5) is
    joined by 1×1-projected upsampled copies of the feature and of the
    exemplar-summed score map; conv3/conv4 add a residual on top and a final
    1×1 projection gives the single-channel map.
    """
    _check_finite(f_q, "enhanced feature")
    _check_finite(r, "score map")
    if r.ndim != 4 or r.shape[1] != 1 or r.shape[2:] != f_q.shape[1:]:
        raise ShapeError(f"score map {r.shape} does not match feature {f_q.shape}")
    slope = cfg.leaky_slope
    a = F.leaky_relu(_conv(f_q, params, f"{prefix}.conv1"), slope)
    a = F.bilinear_resize(a, 2.0)
    a = F.leaky_relu(_conv(a, params, f"{prefix}.conv2"), slope)
    b = F.add(a, _conv(F.bilinear_resize(f_q, 2.0), params, f"{prefix}.res_feat"))
    if cfg.residual_similarity:
        r_sum = F.sum(F.reshape(r, (r.shape[0], *r.shape[2:])), axis=0, keepdims=True)
        b = F.add(b, _conv(F.bilinear_resize(r_sum, 2.0), params, f"{prefix}.res_sim"))
    c = F.leaky_relu(_conv(b, params, f"{prefix}.conv3"), slope)
    c = _conv(c, params, f"{prefix}.conv4")
    out = F.relu(_conv(F.add(b, c), params, f"{prefix}.out"))
    return F.reshape(out, out.shape[1:])


def acfamnet_head_shapes(n_scales: int, prefix: str = "head") -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = n_scales
    for i, (c_out, k) in enumerate(ACFAMNET_LAYERS, start=1):
        shapes[f"{prefix}.conv{i}.weight"] = (c_out, c_in, k, k)
        shapes[f"{prefix}.conv{i}.bias"] = (c_out,)
        c_in = c_out
    return shapes


def pro_head_shapes(channels: int, cfg: HeadConfig, prefix: str = "head") -> dict[str, tuple[int, ...]]:
    e, m = cfg.k_embed, cfg.k_embed // 2
    layers = {
        "conv1": (e, channels, 7),
        "conv2": (m, e, 5),
        "res_feat": (m, channels, 1),
    }
    if cfg.residual_similarity:
        layers["res_sim"] = (m, 1, 1)
    layers.update({"conv3": (m, m, 3), "conv4": (m, m, 3), "out": (1, m, 1)})
    shapes = {}
    for name, (o, i, k) in layers.items():
        shapes[f"{prefix}.{name}.weight"] = (o, i, k, k)
        shapes[f"{prefix}.{name}.bias"] = (o,)
    return shapes
