"""Throughput comparison of the binary convolution routes.

Runs the compiled XNOR-popcount kernel (when built), the pure-numpy packed
fallback, and the naive integer reference over a grid of plane sizes, and
prints outputs per second for each.

Usage: python benchmarks/bench_conv.py [--sizes 32,64,128] [--k 3] [--reps 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ditherbnn.bitconv import (BinaryKernel, HAVE_COMPILED, conv_naive,
                               conv_packed, conv_packed_fallback)
from ditherbnn.planes import pack


def time_route(fn, x, kern, reps: int) -> float:
    fn(x, kern)  # warm up
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(x, kern)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="32,64,128,256")
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--naive-limit", type=int, default=64,
                        help="skip the naive route above this plane size")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    kern = BinaryKernel.from_array(rng.choice([-1, 1], size=(args.k, args.k)))
    print(f"k={args.k}  compiled extension: {'yes' if HAVE_COMPILED else 'no'}")
    print(f"{'size':>6} {'route':>10} {'best (ms)':>10} {'Mout/s':>10}")
    for size in [int(s) for s in args.sizes.split(",")]:
        x = pack(rng.choice([-1, 1], size=(size, size)))
        n_out = (size - args.k + 1) ** 2
        routes = []
        if HAVE_COMPILED:
            routes.append(("compiled", conv_packed))
        routes.append(("numpy", conv_packed_fallback))
        if size <= args.naive_limit:
            routes.append(("naive", conv_naive))
        for name, fn in routes:
            dt = time_route(fn, x, kern, args.reps)
            print(f"{size:>6} {name:>10} {dt * 1e3:>10.3f} {n_out / dt / 1e6:>10.2f}")


if __name__ == "__main__":
    main()
