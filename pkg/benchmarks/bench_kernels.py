"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Compilation happens in a warm-up call and is reported separately.
"""
import argparse
import time

import numpy as np
import numba

from attnprune import kernels


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    z = rng.normal(size=(4096, 32))
    yield "entmax15 4096x32", numba.njit(kernels._entmax15_loop), kernels._entmax15_numpy, (z, 60)

    b, h, n = 32, 4, 32
    w = rng.dirichlet(np.ones(n), size=(b * h, n))
    valid = np.ones(n, dtype=np.bool_)

    def acc(fn):
        def run():
            sums, counts = np.zeros((n, n)), np.zeros((n, n), dtype=np.int64)
            for mat in w:
                fn(sums, counts, mat, valid, valid, True)
        return run

    yield ("accumulate 128 x 32x32 causal", acc(numba.njit(kernels._accumulate_loop)),
           acc(kernels._accumulate_numpy), ())

    weights = rng.dirichlet(np.ones(n), size=(b * h, n))
    values = rng.normal(size=(b * h, n, 16))
    masked = rng.random((b * h, n, n)) < 0.8
    yield ("sparse_apply 128x32x32 p=0.8", numba.njit(kernels._sparse_apply_loop),
           kernels._sparse_apply_numpy, (weights, values, masked))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'compile s':>10s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, jitted, vec, call_args in cases(rng):
        t = time.perf_counter()
        jitted(*call_args)
        compile_s = time.perf_counter() - t
        t_nb = best_of(jitted, call_args, args.repeat)
        t_np = best_of(vec, call_args, args.repeat)
        print(f"{name:32s} {compile_s:10.2f} {t_nb * 1e3:10.2f} {t_np * 1e3:10.2f} "
              f"{t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
