"""Naive-oracle vs optimized kernel timing."""
from __future__ import annotations

import time

import numpy as np

from .cncam import build_pyramid, nn_search, nn_search_naive
from .tmcam import correlation_volume, correlation_volume_naive


class EquivalenceError(AssertionError):
    pass


def _best_time(fn, repeat):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def bench_corr(h=64, w=64, channels=8, d=3, s=3, threads=1, seed=0, repeat=5):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((channels, h, w))
    nbr = rng.standard_normal((channels, h, w))
    t_naive, naive = _best_time(lambda: correlation_volume_naive(ref, nbr, s, d), 1)
    t_opt, opt = _best_time(lambda: correlation_volume(ref, nbr, s, d, threads), repeat)
    valid = np.isfinite(naive)
    if not np.array_equal(valid, np.isfinite(opt)):
        raise EquivalenceError("valid-candidate masks differ")
    err = float(np.max(np.abs(opt[valid] - naive[valid]) / np.maximum(1.0, np.abs(naive[valid]))))
    if err > 1e-6:
        raise EquivalenceError(f"correlation volumes differ by {err:.3e}")
    ops = int(valid.sum())
    return {"kernel": "corr", "ops": ops, "naive_ns_per_op": t_naive / ops * 1e9,
            "optimized_ns_per_op": t_opt / ops * 1e9, "speedup": t_naive / t_opt, "max_rel_err": err}


def bench_nnsearch(h=32, w=32, channels=8, seed=0, repeat=5):
    rng = np.random.default_rng(seed)
    pyr = [np.asarray(p) for p in build_pyramid(rng.standard_normal((channels, h, w)))]
    t_naive, (ni, ns) = _best_time(lambda: nn_search_naive(pyr), 1)
    t_opt, (oi, osc) = _best_time(lambda: nn_search(pyr), repeat)
    for a, b in zip(ni, oi):
        if not np.array_equal(a, b):
            raise EquivalenceError(f"{int((a != b).sum())} nearest-neighbour indices differ")
    err = max(float(np.max(np.abs(a - b))) for a, b in zip(ns, osc))
    if err > 1e-6:
        raise EquivalenceError(f"nearest-neighbour scores differ by {err:.3e}")
    ops = h * w * sum(p.shape[1] * p.shape[2] for p in pyr[1:])
    return {"kernel": "nnsearch", "ops": ops, "naive_ns_per_op": t_naive / ops * 1e9,
            "optimized_ns_per_op": t_opt / ops * 1e9, "speedup": t_naive / t_opt, "max_rel_err": err}
