#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the pure-numpy fallback.

Run:
    python3 benchmarks/bench_kernels.py [--repeats 20]

Times the four-branch loss kernel and rectangle pooling at training-like
sizes and prints a side-by-side table with speedups.
"""

import argparse
import time

import numpy as np

from spml_lab.kernels import load_backend


def bench(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def loss_case(rng, n, c):
    probs = np.clip(rng.random((n, c)), 1e-7, 1 - 1e-7)
    ann = np.zeros((n, c), dtype=np.uint8)
    ann[np.arange(n), rng.integers(0, c, n)] = 1
    pseudo = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=(n, c))
    return np.ascontiguousarray(probs), ann, np.ascontiguousarray(pseudo), probs**2.0


def pool_case(rng, h, w, c, n_rects):
    ev = rng.random((h, w, c))
    integral = np.zeros((h + 1, w + 1, c))
    integral[1:, 1:] = ev.cumsum(axis=0).cumsum(axis=1)
    rects = np.empty((n_rects, 4))
    rects[:, 0] = rng.uniform(0, w / 2, n_rects)
    rects[:, 1] = rng.uniform(0, h / 2, n_rects)
    rects[:, 2] = rects[:, 0] + rng.uniform(1, w / 2, n_rects)
    rects[:, 3] = rects[:, 1] + rng.uniform(1, h / 2, n_rects)
    return integral, np.ascontiguousarray(rects)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    pure = load_backend("pure")
    try:
        compiled = load_backend("compiled")
    except ImportError:
        print("compiled backend not built; run pip install -e . --no-build-isolation")
        return 1

    rng = np.random.default_rng(0)
    rows = []

    for n, c in ((64, 20), (256, 80), (1024, 312)):
        probs, ann, pseudo, k_hat = loss_case(rng, n, c)
        loss_args = (probs, ann, pseudo, k_hat, 0.2, 0.15, 0.1, 0.9, 0.7, 0.65, 0.8)
        t_pure = bench(lambda: pure.gpr_elements(*loss_args), args.repeats)
        t_comp = bench(lambda: compiled.gpr_elements(*loss_args), args.repeats)
        rows.append((f"gpr_elements {n}x{c}", t_pure, t_comp))

    for h, w, c, r in ((32, 32, 20, 17), (64, 64, 80, 37), (448 // 4, 448 // 4, 80, 37)):
        integral, rects = pool_case(rng, h, w, c, r)
        t_pure = bench(lambda: pure.pool_rects(integral, rects), args.repeats)
        t_comp = bench(lambda: compiled.pool_rects(integral, rects), args.repeats)
        rows.append((f"pool_rects {h}x{w}x{c} r={r}", t_pure, t_comp))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'pure':>10}  {'compiled':>10}  {'speedup':>8}")
    for name, t_pure, t_comp in rows:
        print(f"{name:<{width}}  {t_pure * 1e6:>8.1f}us  {t_comp * 1e6:>8.1f}us  {t_pure / t_comp:>7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
