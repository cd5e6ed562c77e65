#!/usr/bin/env python3
"""Race the numba kernels against their pure-numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Both implementations are imported directly, so this works regardless of the
LOOTSCAN_DISABLE_NUMBA setting; the flag only changes which twin the package
binds at import time.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lootscan import _kernels as k


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm-up (and JIT compile for the numba twin)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(rng):
    band = rng.uniform(0, 5000, size=(186, 186))
    mask = np.zeros((186, 186), dtype=bool)
    mask[30:150, 40:160] = True
    levels = rng.integers(0, 16, size=(186, 186)).astype(np.int32)

    n, d = 1400, 42
    values = np.ascontiguousarray(rng.normal(size=(n, d)))
    y = rng.integers(0, 2, size=n)
    w = rng.uniform(0.5, 2.0, size=n)
    w1 = np.where(y == 1, w, 0.0)
    w0 = np.where(y == 0, w, 0.0)
    grad = rng.normal(size=n)
    hess = rng.uniform(0.01, 0.25, size=n)

    # a 100-stump ensemble and a Shapley coalition sweep over 10 features
    n_trees = 100
    feature = np.tile(np.array([0, -1, -1], dtype=np.int32), n_trees)
    feature[::3] = rng.integers(0, 10, size=n_trees)
    threshold = np.tile(np.array([0.0, 0, 0]), n_trees)
    left = np.tile(np.array([1, 0, 0], dtype=np.int32), n_trees)
    right = np.tile(np.array([2, 0, 0], dtype=np.int32), n_trees)
    offsets = np.arange(n_trees, dtype=np.int64) * 3
    left = np.where(feature >= 0, left + np.repeat(offsets, 3), 0).astype(np.int32)
    right = np.where(feature >= 0, right + np.repeat(offsets, 3), 0).astype(np.int32)
    value = rng.normal(size=3 * n_trees)
    flat = (feature, threshold, left, right, value, offsets)
    x_mat = np.ascontiguousarray(rng.normal(size=(2000, 10)))
    instance = rng.normal(size=10)
    background = np.ascontiguousarray(rng.normal(size=(256, 10)))
    bits = ((np.arange(1 << 10)[:, None] >> np.arange(10)) & 1).astype(np.uint8)

    return [
        ("glcm_counts", k.glcm_counts_numpy, k.glcm_counts_numba,
         (levels, mask, 0, 1, 16)),
        ("lbp_histogram", k.lbp_histogram_numpy, k.lbp_histogram_numba,
         (band, mask)),
        ("sobel_magnitude", k.sobel_magnitude_numpy, k.sobel_magnitude_numba,
         (band,)),
        ("split_gini", k.split_gini_numpy, k.split_gini_numba,
         (values, w1, w0)),
        ("split_grad", k.split_grad_numpy, k.split_grad_numba,
         (values, grad, hess, 1.0)),
        ("split_mse", k.split_mse_numpy, k.split_mse_numba,
         (values, grad, w)),
        ("ensemble_sum", k.ensemble_sum_numpy, k.ensemble_sum_numba,
         (*flat, x_mat)),
        ("shap_coalitions", k.shap_coalition_values_numpy, k.shap_coalition_values_numba,
         (*flat, instance, background, bits)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(99)
    print(f"{'kernel':<18}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, fn_np, fn_nb, work in workloads(rng):
        t_np = timeit(fn_np, *work, repeat=args.repeat)
        t_nb = timeit(fn_nb, *work, repeat=args.repeat)
        print(f"{name:<18}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
