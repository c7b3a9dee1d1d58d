"""Differentiable operations on :class:`~fewcount.nn.tensor.Tensor`.

Feature maps are ``(C, H, W)`` or batched ``(N, C, H, W)``. Convolution is
cross-correlation (no kernel flip); use :func:`flip_hw` where a true
convolution is wanted.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural
# ---------------------------------------------------------------------------


def _is_scalar(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _scalar_op(x: Tensor, data: np.ndarray, factor: float) -> Tensor:
    return make_result(data, (x,), lambda g: (g * factor if factor != 1.0 else g,))


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return _scalar_op(a, a.data + b, 1.0)
    if _is_scalar(a):
        return _scalar_op(b, b.data + a, 1.0)
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return _scalar_op(a, a.data - b, 1.0)
    if _is_scalar(a):
        return _scalar_op(b, a - b.data, -1.0)
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return _scalar_op(a, a.data * b, float(b))
    if _is_scalar(a):
        return _scalar_op(b, b.data * a, float(a))
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def index(x: Tensor, idx) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(x.data[idx], (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make_result(np.stack([x.data for x in xs], axis=axis), xs, backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_result(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def flip_hw(x) -> Tensor:
    """Reverse the last two (spatial) axes."""
    x = as_tensor(x)
    return make_result(x.data[..., ::-1, ::-1].copy(), (x,), lambda g: (g[..., ::-1, ::-1].copy(),))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward)


def max_normalized_exp(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """``exp(x) / max(exp(x))`` over ``axes``, computed as ``exp(x - max x)``.

    The maximising entry is exactly 1.
    """
    m = x.data.max(axis=axes, keepdims=True)
    y = np.exp(x.data - m)
    flat_shape = [x.shape[a] for a in range(x.ndim) if a not in axes]
    moved = np.moveaxis(x.data, axes, range(x.ndim - len(axes), x.ndim))
    arg = moved.reshape(*flat_shape, -1).argmax(axis=-1)

    def backward(g):
        gy = g * y
        total = np.moveaxis(gy, axes, range(x.ndim - len(axes), x.ndim)).reshape(*flat_shape, -1).sum(axis=-1)
        gx_moved = np.moveaxis(gy.copy(), axes, range(x.ndim - len(axes), x.ndim)).reshape(*flat_shape, -1)
        np.put_along_axis(
            gx_moved, arg[..., None], np.take_along_axis(gx_moved, arg[..., None], -1) - total[..., None], -1
        )
        gx_moved = gx_moved.reshape(moved.shape)
        return (np.moveaxis(gx_moved, range(x.ndim - len(axes), x.ndim), axes),)

    return make_result(y, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _resolve_padding(padding, kh: int, kw: int) -> tuple[int, int, int, int]:
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        return top, kh - 1 - top, left, kw - 1 - left
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    top, bottom, left, right = padding
    return int(top), int(bottom), int(left), int(right)


def conv2d(x, weight, bias=None, stride: int = 1, padding="same") -> Tensor:
    """Cross-correlate ``x`` (C,H,W or N,C,H,W) with ``weight`` (O,C,kh,kw).

    ``padding`` is ``"same"``, a symmetric int, or ``(top, bottom, left, right)``.
    Zero padding. Both ``x`` and ``weight`` may carry gradients, so the same
    op serves static layers and dynamic (exemplar-derived) kernels.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (N,)C,H,W input and O,C,kh,kw weight; got {x.shape}, {weight.shape}")
    N, C, H, W = xd.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels, kernel expects {Cw}")
    if kh < 1 or kw < 1 or stride < 1:
        raise ShapeError("kernel size and stride must be positive")
    pt, pb, pl, pr = _resolve_padding(padding, kh, kw)
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
    Hp, Wp = xp.shape[2:]
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {H}x{W} and kernel {kh}x{kw}")
    P = Ho * Wo
    wd = weight.data
    dtype = np.result_type(xd.dtype, wd.dtype)
    # (kh, kw, O, C) contiguous so every per-offset matmul hits BLAS
    wk = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))

    def window(a: int, b: int) -> np.ndarray:
        return xp[:, :, a : a + stride * (Ho - 1) + 1 : stride, b : b + stride * (Wo - 1) + 1 : stride].reshape(N, C, P)

    out = np.zeros((N, O, P), dtype=dtype)
    for a in range(kh):
        for b in range(kw):
            out += np.matmul(wk[a, b], window(a, b))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None]
        parents.append(bias)
    out = out.reshape(N, O, Ho, Wo)
    if squeeze:
        out = out[0]

    def backward(g):
        g = (g[None] if squeeze else g).reshape(N, O, P)
        gx = gw = None
        if weight.requires_grad:
            gwk = np.zeros((kh, kw, O, C), dtype=dtype)
            for a in range(kh):
                for b in range(kw):
                    win = window(a, b)
                    for n in range(N):
                        gwk[a, b] += g[n] @ win[n].T
            gw = gwk.transpose(2, 3, 0, 1)
        if x.requires_grad:
            wkt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
            gxp = np.zeros(xp.shape, dtype=dtype)
            for a in range(kh):
                for b in range(kw):
                    sl = gxp[:, :, a : a + stride * (Ho - 1) + 1 : stride, b : b + stride * (Wo - 1) + 1 : stride]
                    sl += np.matmul(wkt[a, b], g).reshape(N, C, Ho, Wo)
            gx = gxp[:, :, pt : pt + H, pl : pl + W]
            gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return make_result(out, parents, backward)


def correlate(query, kernel) -> Tensor:
    """Single-channel similarity map of ``query`` (C,H,W) against a C×kh×kw kernel.

    Zero same-padding; the output has the query's spatial size.
    """
    query, kernel = as_tensor(query), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"dynamic kernel must be C×kh×kw, got {kernel.shape}")
    if kernel.shape[0] != query.shape[-3]:
        raise ShapeError(f"kernel has {kernel.shape[0]} channels, query has {query.shape[-3]}")
    return conv2d(query, reshape(kernel, (1, *kernel.shape)), padding="same")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix (n_out, n_in), half-pixel (align-corners-false) sampling."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    m.flags.writeable = False
    return m


def bilinear_resize(x, scale: float) -> Tensor:
    """Resize the last two axes by ``scale`` to round(scale·H) × round(scale·W)."""
    x = as_tensor(x)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    H, W = x.shape[-2:]
    Ho, Wo = int(round(scale * H)), int(round(scale * W))
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"resize of {H}x{W} by {scale} is empty")
    ry = _resize_matrix(H, Ho).astype(x.dtype, copy=False)
    rx = _resize_matrix(W, Wo).astype(x.dtype, copy=False)
    return make_result(ry @ x.data @ rx.T, (x,), lambda g: (ry.T @ g @ rx,))


def roi_align(feat, box, out_h: int, out_w: int) -> Tensor:
    """Pool ``box`` = (x, y, h, w) of a (C,H,W) map to C×out_h×out_w, no quantisation."""
    feat = as_tensor(feat)
    _check_roi(feat, box, out_h, out_w)
    box = tuple(float(v) for v in box)
    out = kernels.roi_align_forward(feat.data, box, out_h, out_w).astype(feat.dtype, copy=False)
    return make_result(
        out, (feat,), lambda g: (kernels.roi_align_backward(g, feat.shape, box).astype(feat.dtype, copy=False),)
    )


def roi_pool(feat, box, out_h: int, out_w: int) -> Tensor:
    """Quantised RoI max pooling of ``box`` = (x, y, h, w) to C×out_h×out_w."""
    feat = as_tensor(feat)
    _check_roi(feat, box, out_h, out_w)
    out, argmax = kernels.roi_pool_forward(feat.data, tuple(float(v) for v in box), out_h, out_w)
    return make_result(out, (feat,), lambda g: (kernels.roi_pool_backward(g, feat.shape, argmax),))


def _check_roi(feat: Tensor, box, out_h: int, out_w: int) -> None:
    if feat.ndim != 3:
        raise ShapeError(f"RoI ops expect a C×H×W map, got {feat.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("RoI output size must be positive")
    x, y, h, w = box
    if not (h > 0 and w > 0):
        raise ValueError(f"degenerate box {tuple(box)}")
    H, W = feat.shape[1:]
    if x >= W or y >= H or x + w <= 0 or y + h <= 0:
        raise ValueError(f"box {tuple(box)} does not intersect a {H}x{W} feature map")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m = np.prod([xhat.shape[a] for a in axes])
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv_std / m * (m * g_hat - s1 - xhat * s2)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm on (C,H,W) or (N,C,H,W).

    In training mode the running statistics are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-3]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batch_norm parameters do not match {C} channels")
    xd = x.data[None] if x.ndim == 3 else x.data
    axes = (0, 2, 3)
    shape = (1, C, 1, 1)
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        n = xd.size // C
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1.0 - momentum
        running_var += momentum * var.ravel() * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(shape).astype(xd.dtype)
        var = running_var.reshape(shape).astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    if x.ndim == 3:
        out = out[0]

    def backward(g):
        g4 = g[None] if x.ndim == 3 else g
        g_hat = g4 * gamma.data.reshape(shape)
        if training:
            gx = _normalize_backward(g_hat, xhat, inv_std, axes)
        else:
            gx = g_hat * inv_std
        if x.ndim == 3:
            gx = gx[0]
        return gx, (g4 * xhat).sum(axis=axes), g4.sum(axis=axes)

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each instance over its trailing (C,H,W) axes, then apply a per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-3]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm parameters {gamma.shape} do not match {C} channels")
    axes = (-3, -2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_shape = (C, 1, 1)
    out = gamma.data.reshape(g_shape) * xhat + beta.data.reshape(g_shape)

    def backward(g):
        gx = _normalize_backward(g * gamma.data.reshape(g_shape), xhat, inv_std, axes)
        lead = tuple(range(x.ndim - 3))
        gg = (g * xhat).sum(axis=lead + (-2, -1))
        gb = g.sum(axis=lead + (-2, -1))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return make_result(
        np.asarray(np.mean(diff * diff), dtype=pred.dtype),
        (pred, target),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )
