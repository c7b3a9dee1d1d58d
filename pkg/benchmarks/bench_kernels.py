"""Compare the numba and numpy implementations of the hot loop kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is run on the same inputs through both paths. The script reports
the median wall time per call and the largest absolute difference between the
two results. A second table times ground-truth generation end to end in a
fresh interpreter per backend, with FEWCOUNT_DISABLE_NUMBA toggled, so the
numbers include whatever dispatch the package does at import time.
"""

from __future__ import annotations

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from fewcount import _jit
from fewcount.nn import kernels as K


def _median_time(fn, repeat: int) -> float:
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def kernel_cases(rng: np.random.Generator):
    feat = rng.standard_normal((64, 96, 96))
    box = (13.3, 20.7, 31.4, 27.9)  # x, y, h, w
    grad = rng.standard_normal((64, 7, 7))
    rows = rng.integers(0, 256, 400)
    cols = rng.integers(0, 256, 400)
    yield (
        "roi_align forward",
        lambda: K.roi_align_forward_numpy(feat, box, 7, 7),
        lambda: K.roi_align_forward_numba(feat, box, 7, 7),
    )
    yield (
        "roi_align backward",
        lambda: K.roi_align_backward_numpy(grad, feat.shape, box),
        lambda: K.roi_align_backward_numba(grad, feat.shape, box),
    )
    yield (
        "roi_pool forward",
        lambda: K.roi_pool_forward_numpy(feat, box, 7, 7)[0],
        lambda: K.roi_pool_forward_numba(feat, box, 7, 7)[0],
    )
    yield (
        "stamp_gaussians",
        lambda: K.stamp_gaussians_numpy(rows, cols, 256, 256, 15, 3.75),
        lambda: K.stamp_gaussians_numba(rows, cols, 256, 256, 15, 3.75),
    )


def bench_kernels(repeat: int) -> None:
    if not _jit.HAVE_NUMBA:
        print("numba unavailable or disabled; the numba column runs interpreted loops")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, with_numpy, with_numba in kernel_cases(np.random.default_rng(0)):
        diff = float(np.max(np.abs(np.asarray(with_numpy()) - np.asarray(with_numba()))))
        t_np = _median_time(with_numpy, repeat)
        t_nb = _median_time(with_numba, repeat)
        print(f"{name:<20} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x {diff:>11.2e}")


_END_TO_END = """
import time, numpy as np
from fewcount import backend
from fewcount.dataset import gt_density
rng = np.random.default_rng(0)
dots = [rng.uniform(0, 384, (300, 2)) for _ in range(20)]
gt_density(dots[0], 384, 384)
t = time.perf_counter()
for d in dots:
    gt_density(d, 384, 384)
print(backend(), (time.perf_counter() - t) / len(dots))
"""


def bench_end_to_end() -> None:
    print(f"\n{'backend':<20} {'gt_density ms':>14}")
    for disable in ("0", "1"):
        env = {**os.environ, "FEWCOUNT_DISABLE_NUMBA": disable}
        out = subprocess.run(
            [sys.executable, "-c", _END_TO_END], env=env, capture_output=True, text=True, check=True
        ).stdout.split()
        print(f"{out[0]:<20} {1e3 * float(out[1]):>14.3f}")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    bench_kernels(args.repeat)
    bench_end_to_end()


if __name__ == "__main__":
    main()
