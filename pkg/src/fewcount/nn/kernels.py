"""Hot loop kernels: RoI Align, RoI pooling and Gaussian stamping.

Every kernel has a numba loop implementation and a vectorised numpy one.
The public names resolve to whichever backend ``fewcount._jit`` selected;
both are importable explicitly for cross-checks and benchmarks.

Box convention for the RoI kernels: ``(x, y, h, w)`` in continuous feature
coordinates where cell ``i`` spans ``[i, i + 1)``, so a sample at continuous
position ``p`` reads index position ``p - 0.5``. Index positions are clamped
to ``[0, size - 1]`` before bilinear interpolation.
"""

from __future__ import annotations

import math

import numpy as np

from .._jit import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# RoI Align (2x2 samples per output cell, averaged)
# ---------------------------------------------------------------------------


def align_matrix(start: float, length: float, n_out: int, size: int, dtype=np.float64) -> np.ndarray:
    """Averaging interpolation matrix of shape (n_out, size) along one axis."""
    m = np.zeros((n_out, size), dtype=dtype)
    step = length / n_out
    rows = np.repeat(np.arange(n_out), 2)
    pos = start + np.arange(n_out)[:, None] * step + (np.array([0.25, 0.75]) * step)[None, :]
    idx = np.clip(pos.ravel() - 0.5, 0.0, size - 1)
    lo = np.floor(idx).astype(np.int64)
    frac = idx - lo
    hi = np.minimum(lo + 1, size - 1)
    np.add.at(m, (rows, lo), 0.5 * (1.0 - frac))
    np.add.at(m, (rows, hi), 0.5 * frac)
    return m


def roi_align_forward_numpy(feat: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    x, y, h, w = box
    _, H, W = feat.shape
    my = align_matrix(y, h, out_h, H, feat.dtype)
    mx = align_matrix(x, w, out_w, W, feat.dtype)
    return my @ feat @ mx.T


def roi_align_backward_numpy(grad: np.ndarray, shape, box) -> np.ndarray:
    x, y, h, w = box
    _, H, W = shape
    out_h, out_w = grad.shape[1:]
    my = align_matrix(y, h, out_h, H, grad.dtype)
    mx = align_matrix(x, w, out_w, W, grad.dtype)
    return my.T @ grad @ mx


@njit(cache=True)
def _clamped_lerp_index(p, size):
    q = p - 0.5
    if q < 0.0:
        q = 0.0
    elif q > size - 1:
        q = size - 1.0
    lo = int(math.floor(q))
    hi = lo + 1 if lo + 1 < size else size - 1
    return lo, hi, q - lo


@njit(cache=True)
def _roi_align_fwd_loop(feat, x, y, h, w, out_h, out_w):
    C, H, W = feat.shape
    out = np.zeros((C, out_h, out_w), dtype=feat.dtype)
    bh = h / out_h
    bw = w / out_w
    for i in range(out_h):
        for sy in range(2):
            y0, y1, fy = _clamped_lerp_index(y + i * bh + (sy + 0.5) * 0.5 * bh, H)
            for j in range(out_w):
                for sx in range(2):
                    x0, x1, fx = _clamped_lerp_index(x + j * bw + (sx + 0.5) * 0.5 * bw, W)
                    w00 = 0.25 * (1.0 - fy) * (1.0 - fx)
                    w01 = 0.25 * (1.0 - fy) * fx
                    w10 = 0.25 * fy * (1.0 - fx)
                    w11 = 0.25 * fy * fx
                    for c in range(C):
                        out[c, i, j] += (
                            w00 * feat[c, y0, x0]
                            + w01 * feat[c, y0, x1]
                            + w10 * feat[c, y1, x0]
                            + w11 * feat[c, y1, x1]
                        )
    return out


@njit(cache=True)
def _roi_align_bwd_loop(grad, H, W, x, y, h, w):
    C, out_h, out_w = grad.shape
    gin = np.zeros((C, H, W), dtype=grad.dtype)
    bh = h / out_h
    bw = w / out_w
    for i in range(out_h):
        for sy in range(2):
            y0, y1, fy = _clamped_lerp_index(y + i * bh + (sy + 0.5) * 0.5 * bh, H)
            for j in range(out_w):
                for sx in range(2):
                    x0, x1, fx = _clamped_lerp_index(x + j * bw + (sx + 0.5) * 0.5 * bw, W)
                    w00 = 0.25 * (1.0 - fy) * (1.0 - fx)
                    w01 = 0.25 * (1.0 - fy) * fx
                    w10 = 0.25 * fy * (1.0 - fx)
                    w11 = 0.25 * fy * fx
                    for c in range(C):
                        g = grad[c, i, j]
                        gin[c, y0, x0] += w00 * g
                        gin[c, y0, x1] += w01 * g
                        gin[c, y1, x0] += w10 * g
                        gin[c, y1, x1] += w11 * g
    return gin


def roi_align_forward_numba(feat: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    x, y, h, w = (float(v) for v in box)
    return _roi_align_fwd_loop(np.ascontiguousarray(feat), x, y, h, w, out_h, out_w)


def roi_align_backward_numba(grad: np.ndarray, shape, box) -> np.ndarray:
    x, y, h, w = (float(v) for v in box)
    return _roi_align_bwd_loop(np.ascontiguousarray(grad), shape[1], shape[2], x, y, h, w)


# ---------------------------------------------------------------------------
# RoI pooling (quantised bins, max)
# ---------------------------------------------------------------------------


def pool_bins(start: float, length: float, n_out: int, size: int) -> np.ndarray:
    """Integer ``[lo, hi)`` bounds of each bin along one axis, shape (n_out, 2)."""
    a = max(int(math.floor(start)), 0)
    b = min(max(int(math.floor(start + length)), a + 1), size)
    if b <= a:
        a = min(a, size - 1)
        b = a + 1
    span = b - a
    bins = np.empty((n_out, 2), dtype=np.int64)
    for i in range(n_out):
        bins[i, 0] = a + (i * span) // n_out
        bins[i, 1] = a + -((-(i + 1) * span) // n_out)
    return bins


def roi_pool_forward_numpy(feat: np.ndarray, box, out_h: int, out_w: int):
    x, y, h, w = box
    C, H, W = feat.shape
    by = pool_bins(y, h, out_h, H)
    bx = pool_bins(x, w, out_w, W)
    out = np.empty((C, out_h, out_w), dtype=feat.dtype)
    argmax = np.empty((C, out_h, out_w), dtype=np.int64)
    for i, (y0, y1) in enumerate(by):
        for j, (x0, x1) in enumerate(bx):
            patch = feat[:, y0:y1, x0:x1].reshape(C, -1)
            k = patch.argmax(axis=1)
            out[:, i, j] = patch[np.arange(C), k]
            pw = x1 - x0
            argmax[:, i, j] = (y0 + k // pw) * W + (x0 + k % pw)
    return out, argmax


@njit(cache=True)
def _roi_pool_fwd_loop(feat, by, bx):
    C, H, W = feat.shape
    out_h = by.shape[0]
    out_w = bx.shape[0]
    out = np.empty((C, out_h, out_w), dtype=feat.dtype)
    argmax = np.empty((C, out_h, out_w), dtype=np.int64)
    for c in range(C):
        for i in range(out_h):
            for j in range(out_w):
                best = -np.inf
                best_k = -1
                for yy in range(by[i, 0], by[i, 1]):
                    for xx in range(bx[j, 0], bx[j, 1]):
                        v = feat[c, yy, xx]
                        if v > best or best_k < 0:
                            best = v
                            best_k = yy * W + xx
                out[c, i, j] = best
                argmax[c, i, j] = best_k
    return out, argmax


def roi_pool_forward_numba(feat: np.ndarray, box, out_h: int, out_w: int):
    x, y, h, w = box
    _, H, W = feat.shape
    return _roi_pool_fwd_loop(
        np.ascontiguousarray(feat), pool_bins(y, h, out_h, H), pool_bins(x, w, out_w, W)
    )


def roi_pool_backward(grad: np.ndarray, shape, argmax: np.ndarray) -> np.ndarray:
    C, H, W = shape
    gin = np.zeros((C, H * W), dtype=grad.dtype)
    rows = np.broadcast_to(np.arange(C)[:, None, None], argmax.shape)
    np.add.at(gin, (rows.ravel(), argmax.ravel()), grad.ravel())
    return gin.reshape(C, H, W)


# ---------------------------------------------------------------------------
# Gaussian stamping for ground-truth density maps
# ---------------------------------------------------------------------------


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    g = np.exp(-((np.arange(window) - r) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def stamp_gaussians_numpy(rows: np.ndarray, cols: np.ndarray, H: int, W: int, window: int, sigma: float) -> np.ndarray:
    out = np.zeros((H, W), dtype=np.float64)
    k = gaussian_kernel(window, sigma)
    r = window // 2
    for cy, cx in zip(rows, cols):
        y0, y1 = max(cy - r, 0), min(cy + r + 1, H)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, W)
        piece = k[y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)]
        out[y0:y1, x0:x1] += piece / piece.sum()
    return out


@njit(cache=True)
def _stamp_loop(rows, cols, H, W, k):
    out = np.zeros((H, W), dtype=np.float64)
    r = k.shape[0] // 2
    for n in range(rows.shape[0]):
        cy = rows[n]
        cx = cols[n]
        y0 = max(cy - r, 0)
        y1 = min(cy + r + 1, H)
        x0 = max(cx - r, 0)
        x1 = min(cx + r + 1, W)
        total = 0.0
        for yy in range(y0, y1):
            for xx in range(x0, x1):
                total += k[yy - cy + r, xx - cx + r]
        for yy in range(y0, y1):
            for xx in range(x0, x1):
                out[yy, xx] += k[yy - cy + r, xx - cx + r] / total
    return out


def stamp_gaussians_numba(rows: np.ndarray, cols: np.ndarray, H: int, W: int, window: int, sigma: float) -> np.ndarray:
    return _stamp_loop(
        np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), H, W, gaussian_kernel(window, sigma)
    )


if HAVE_NUMBA:
    roi_align_forward = roi_align_forward_numba
    roi_align_backward = roi_align_backward_numba
    roi_pool_forward = roi_pool_forward_numba
    stamp_gaussians = stamp_gaussians_numba
else:
    roi_align_forward = roi_align_forward_numpy
    roi_align_backward = roi_align_backward_numpy
    roi_pool_forward = roi_pool_forward_numpy
    stamp_gaussians = stamp_gaussians_numpy
