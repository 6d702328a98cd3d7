"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from odoflow import kernels

CASES = [
    ("fps 2048 of 8192", lambda rng: (kernels.fps, (rng.normal(size=(8192, 3)), 2048, 0))),
    ("fps 256 of 512", lambda rng: (kernels.fps, (rng.normal(size=(512, 3)), 256, 0))),
    ("knn k=16, 1024 x 1024", lambda rng: (kernels.knn, (rng.normal(size=(1024, 3)), rng.normal(size=(1024, 3)), 16))),
    ("knn k=8, 256 x 256", lambda rng: (kernels.knn, (rng.normal(size=(256, 3)), rng.normal(size=(256, 3)), 8))),
    ("scatter_add 65536 rows -> 1024 x 32",
     lambda rng: (kernels.scatter_add, (np.zeros((1024, 32)), rng.integers(0, 1024, 65536),
                                        rng.normal(size=(65536, 32))))),
]


def bench(fn, args, backend, repeat):
    return min(timeit.repeat(lambda: fn(*args, backend=backend), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not built; run `python setup.py build_ext --inplace` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':40s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speedup':>8s}")
    for name, make in CASES:
        fn, fargs = make(rng)
        t_py = bench(fn, fargs, "python", args.repeat)
        t_cy = bench(fn, fargs, "cython", args.repeat)
        print(f"{name:40s} {t_py * 1e3:12.2f} {t_cy * 1e3:12.2f} {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
