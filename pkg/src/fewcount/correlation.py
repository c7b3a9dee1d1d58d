"""Backbone features, exemplar support features and similarity scoring.

Covers both architectures: the plain query/support correlation used by
ACFamNet and the residual feature enhancement (RFE) block of ACFamNet Pro.
Parameter tensors are looked up by name in a flat mapping; see
:mod:`fewcount.model` for the naming scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .nn import functional as F
from .nn.functional import ShapeError
from .nn.tensor import Tensor, as_tensor

Params = Mapping[str, Tensor]


class ExemplarError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"exemplar {index}: {message}")
        self.index = index


@dataclass
class SupportFeatures:
    """Support grids of shape (K, S, channels, H_S, W_S)."""

    grids: Tensor
    scales: tuple[float, ...]

    @property
    def n_exemplars(self) -> int:
        return self.grids.shape[0]

    def flat(self) -> Tensor:
        """Exemplar and scale axes merged (exemplar-major) into one leading axis."""
        K, S, C, h, w = self.grids.shape
        return F.reshape(self.grids, (K * S, C, h, w))


@dataclass
class ScoreMaps:
    r0: Tensor
    r_en: Tensor
    r_sn: Tensor
    r: Tensor


def _require_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def extract_query_feature(
    image,
    params: Params,
    state: Mapping[str, np.ndarray],
    training: bool = False,
    prefix: str = "backbone",
) -> Tensor:
    """7×7 stride-2 conv, batch norm, ReLU. Returns k × H/2 × W/2."""
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a normalised 3×H×W image, got {image.shape}")
    H, W = image.shape[1:]
    if H % 2 or W % 2:
        raise ShapeError(f"image height and width must be even, got {H}x{W}")
    x = F.conv2d(image, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride=2, padding=3)
    x = F.batch_norm(
        x,
        params[f"{prefix}.bn.weight"],
        params[f"{prefix}.bn.bias"],
        state[f"{prefix}.bn.running_mean"],
        state[f"{prefix}.bn.running_var"],
        training=training,
    )
    return F.relu(x)


def scale_box(box: Sequence[float], s: float, H: int, W: int) -> tuple[float, float, float, float]:
    """Scale an (x, y, h, w) box about its centre, clipped to an H×W image."""
    x, y, h, w = map(float, box)
    cx, cy = x + w / 2.0, y + h / 2.0
    x0, x1 = max(cx - s * w / 2.0, 0.0), min(cx + s * w / 2.0, float(W))
    y0, y1 = max(cy - s * h / 2.0, 0.0), min(cy + s * h / 2.0, float(H))
    return x0, y0, y1 - y0, x1 - x0


def extract_support_features(
    f_q: Tensor,
    boxes: Sequence[Sequence[float]],
    out: tuple[int, int],
    scales: Sequence[float] = (1.0,),
    roi_mode: str = "align",
) -> SupportFeatures:
    """Crop each (image-coordinate) box at each scale from the half-resolution map."""
    if roi_mode not in ("align", "pool"):
        raise ValueError(f"roi_mode must be 'align' or 'pool', got {roi_mode!r}")
    if len(boxes) == 0:
        raise ValueError("at least one exemplar box is required")
    roi = F.roi_align if roi_mode == "align" else F.roi_pool
    _, Hq, Wq = f_q.shape
    H, W = 2 * Hq, 2 * Wq
    rows = []
    for i, box in enumerate(boxes):
        per_scale = []
        for s in scales:
            x, y, h, w = scale_box(box, s, H, W)
            if h <= 0 or w <= 0:
                raise ExemplarError(i, f"box {tuple(box)} scaled by {s} is empty inside the {W}x{H} image")
            try:
                per_scale.append(roi(f_q, (x / 2.0, y / 2.0, h / 2.0, w / 2.0), out[0], out[1]))
            except ValueError as exc:
                raise ExemplarError(i, str(exc)) from None
        rows.append(F.stack(per_scale, axis=0))
    return SupportFeatures(F.stack(rows, axis=0), tuple(float(s) for s in scales))


def acfamnet_similarity(f_q: Tensor, supports: SupportFeatures) -> Tensor:
    """Correlate the query map with every support grid: K × S × H_Q × W_Q."""
    K, S, C, h, w = supports.grids.shape
    if C != f_q.shape[0]:
        raise ShapeError(f"support grids have {C} channels, query feature has {f_q.shape[0]}")
    sim = F.conv2d(f_q, supports.flat(), padding="same")
    return F.reshape(sim, (K, S, *f_q.shape[1:]))


# ---------------------------------------------------------------------------
# residual feature enhancement
# ---------------------------------------------------------------------------


def project_features(f_q: Tensor, f_s: Tensor, params: Params, prefix: str) -> tuple[Tensor, Tensor]:
    """Shared 1×1 conv + layer norm for the query map and each support grid."""
    weight, bias = params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"]
    if weight.shape[1] != f_q.shape[0] or weight.shape[1] != f_s.shape[1]:
        raise ShapeError(
            f"projection expects {weight.shape[1]} channels, got query {f_q.shape[0]} / support {f_s.shape[1]}"
        )
    gamma, beta = params[f"{prefix}.proj_ln.weight"], params[f"{prefix}.proj_ln.bias"]
    f_pq = F.layer_norm(F.conv2d(f_q, weight, bias, padding=0), gamma, beta)
    f_ps = F.layer_norm(F.conv2d(f_s, weight, bias, padding=0), gamma, beta)
    return f_pq, f_ps


def compare(f_pq: Tensor, f_ps: Tensor) -> Tensor:
    """Score map R0 (K, 1, H_Q, W_Q): each projected support used as a kernel."""
    if f_ps.ndim != 4 or f_ps.shape[1] != f_pq.shape[0]:
        raise ShapeError(f"support stack {f_ps.shape} does not match query {f_pq.shape}")
    r0 = F.conv2d(f_pq, f_ps, padding="same")
    return F.reshape(r0, (f_ps.shape[0], 1, *f_pq.shape[1:]))


def _score_scale(h_s: int, w_s: int, channels: int) -> float:
    return 1.0 / math.sqrt(h_s * w_s * channels)


def enorm(r0: Tensor, h_s: int, w_s: int, channels: int) -> Tensor:
    """Softmax across exemplars of the scaled scores."""
    _require_finite(r0, "score map")
    return F.softmax(F.mul(r0, _score_scale(h_s, w_s, channels)), axis=0)


def snorm(r0: Tensor, h_s: int, w_s: int, channels: int) -> Tensor:
    """exp of the scaled scores over its per-exemplar spatial maximum."""
    _require_finite(r0, "score map")
    return F.max_normalized_exp(F.mul(r0, _score_scale(h_s, w_s, channels)), axes=(2, 3))


def combine_scores(r_en: Tensor, r_sn: Tensor) -> Tensor:
    if r_en.shape != r_sn.shape:
        raise ShapeError(f"score maps differ in shape: {r_en.shape} vs {r_sn.shape}")
    return F.mul(r_en, r_sn)


def score_maps(f_pq: Tensor, f_ps: Tensor) -> ScoreMaps:
    _, C, h_s, w_s = f_ps.shape
    r0 = compare(f_pq, f_ps)
    r_en = enorm(r0, h_s, w_s, C)
    r_sn = snorm(r0, h_s, w_s, C)
    return ScoreMaps(r0, r_en, r_sn, combine_scores(r_en, r_sn))


def weighted_aggregate(r: Tensor, f_ps: Tensor) -> Tensor:
    """Sum over exemplars of R[i] convolved with the flipped support f_PS[i], per channel.

    The padding is the mirror of :func:`compare`'s, so a one-hot R at p copies
    f_PS onto the query grid anchored exactly where ``compare`` would have
    scored it at p (for odd support sizes this is plain same-padding).
    """
    K, one, H, W = r.shape
    if one != 1 or f_ps.ndim != 4 or f_ps.shape[0] != K:
        raise ShapeError(f"similarity {r.shape} and support stack {f_ps.shape} disagree")
    _, C, kh, kw = f_ps.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    kernel = F.transpose(F.flip_hw(f_ps), (1, 0, 2, 3))
    return F.conv2d(F.reshape(r, (K, H, W)), kernel, padding=(kh - 1 - top, top, kw - 1 - left, left))


def feature_fusion(
    f_pq: Tensor,
    f_r: Tensor,
    params: Params,
    prefix: str,
    training: bool = False,
    dropout_p: float = 0.1,
    leaky_slope: float = 0.01,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """LayerNorm(f_PQ + h(LayerNorm(a·f_R + b))) with h = conv3×3, leaky ReLU, dropout, conv3×3."""
    if f_r.shape != f_pq.shape:
        raise ShapeError(f"aggregated feature {f_r.shape} does not match projected query {f_pq.shape}")
    scaled = F.add(F.mul(f_r, params[f"{prefix}.fuse.scale"]), params[f"{prefix}.fuse.shift"])
    f_pr = F.layer_norm(scaled, params[f"{prefix}.fuse_ln.weight"], params[f"{prefix}.fuse_ln.bias"])
    h = F.conv2d(f_pr, params[f"{prefix}.h1.weight"], params[f"{prefix}.h1.bias"], padding="same")
    h = F.dropout(F.leaky_relu(h, leaky_slope), dropout_p, training, rng)
    h = F.conv2d(h, params[f"{prefix}.h2.weight"], params[f"{prefix}.h2.bias"], padding="same")
    return F.layer_norm(F.add(f_pq, h), params[f"{prefix}.out_ln.weight"], params[f"{prefix}.out_ln.bias"])


def rfe_block(
    feat: Tensor,
    boxes,
    params: Params,
    prefix: str,
    roi_out: tuple[int, int],
    scales: Sequence[float],
    roi_mode: str,
    training: bool = False,
    dropout_p: float = 0.1,
    leaky_slope: float = 0.01,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ScoreMaps]:
    supports = extract_support_features(feat, boxes, roi_out, scales, roi_mode)
    f_pq, f_ps = project_features(feat, supports.flat(), params, prefix)
    scores = score_maps(f_pq, f_ps)
    f_r = weighted_aggregate(scores.r, f_ps)
    enhanced = feature_fusion(f_pq, f_r, params, prefix, training, dropout_p, leaky_slope, rng)
    return enhanced, scores


def rfe_stack(
    f_q: Tensor,
    boxes,
    params: Params,
    n_blocks: int,
    roi_out: tuple[int, int],
    scales: Sequence[float] = (1.0,),
    roi_mode: str = "align",
    training: bool = False,
    dropout_p: float = 0.1,
    leaky_slope: float = 0.01,
    rng: np.random.Generator | None = None,
    prefix: str = "rfe",
) -> tuple[Tensor, Tensor]:
    """Run ``n_blocks`` enhancement blocks; supports are re-cropped from each block's input.

    Returns the final enhanced feature and the final combined score map R.
    """
    if n_blocks < 1:
        raise ValueError(f"need at least one enhancement block, got {n_blocks}")
    feat = f_q
    scores = None
    for j in range(n_blocks):
        feat, scores = rfe_block(
            feat, boxes, params, f"{prefix}.{j}", roi_out, scales, roi_mode, training, dropout_p, leaky_slope, rng
        )
    return feat, scores.r
