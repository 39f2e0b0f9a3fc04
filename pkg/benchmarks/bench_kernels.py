"""Time the numba kernels against their numpy fallbacks.

Both variants live in ``hierfig.kernels`` regardless of HIERFIG_DISABLE_JIT,
so one process can compare them. Results are checked for agreement before
timing.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hierfig import kernels
from hierfig._accel import NUMBA_AVAILABLE


def _boxes(rng, n):
    xy = rng.uniform(0, 900, (n, 2))
    wh = rng.uniform(5, 120, (n, 2))
    return np.ascontiguousarray(np.hstack([xy, xy + wh]))


def _best(fn, repeat):
    fn()  # warm-up (compiles the jitted variant)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    a, b = _boxes(rng, 400), _boxes(rng, 400)
    nms_boxes = _boxes(rng, 2000)
    fmap = rng.normal(size=(32, 32, 16))
    rois = rng.uniform(0, 0.5, (300, 2))
    rois = np.hstack([rois, rois + rng.uniform(0.1, 0.5, (300, 2))])
    sim = rng.normal(size=(600, 600))
    gt = rng.permutation(600)
    return {
        "iou_matrix 400x400": (lambda f: f(a, b), kernels.iou_matrix_np, kernels.iou_matrix_nb),
        "greedy_nms n=2000": (lambda f: f(nms_boxes, 0.7), kernels.greedy_nms_np, kernels.greedy_nms_nb),
        "roi_pool 300 rois 3x3": (lambda f: [f(fmap, r, 3) for r in rois], kernels.roi_pool_np,
                                  kernels.roi_pool_nb),
        "gt_ranks 600x600": (lambda f: f(sim, gt), kernels.gt_ranks_np, kernels.gt_ranks_nb),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="numba vs numpy kernel timings")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare")
        return 0
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (call, f_np, f_nb) in cases(rng).items():
        r_np, r_nb = call(f_np), call(f_nb)
        if not all(np.allclose(x, y, atol=1e-12) for x, y in zip(np.atleast_1d(r_np), np.atleast_1d(r_nb))):
            raise SystemExit(f"{name}: numba and numpy results disagree")
        t_np = _best(lambda: call(f_np), args.repeat)
        t_nb = _best(lambda: call(f_nb), args.repeat)
        print(f"{name:<24}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
