"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` takes one Tensor per input array and returns a scalar Tensor.
    Inputs are promoted to float64. With ``probes`` set, only that many
    randomly chosen coordinates per input are perturbed.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, scale)``
    where ``scale`` is 1e-3 times the largest gradient magnitude seen for
    that input, so entries whose true gradient is ~0 do not blow up.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("grad_check inputs must be finite")
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise ValueError("function value is not finite")
    out.backward()
    rng = np.random.default_rng(seed)

    def value() -> float:
        v = float(fn(*[Tensor(a) for a in arrays]).data)
        if not np.isfinite(v):
            raise ValueError("function value is not finite under perturbation")
        return v

    worst = 0.0
    for a, t in zip(arrays, tensors):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idx = rng.choice(flat.size, size=probes, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric[n] = (up - down) / (2.0 * eps)
        an = analytic.reshape(-1)[idx]
        scale = 1e-3 * max(np.abs(an).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), scale)
        worst = max(worst, float(np.max(np.abs(an - numeric) / denom, initial=0.0)))
    return worst
