"""Compare the compiled and pure-Python adaptive smoothing kernels.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--size H] [--channels C]

Times forward and backward smoothing on a random feature map with a
varied sigma map and prints milliseconds per call and the speedup.
"""

import argparse
import time

import numpy as np

from dynseg import _backend
from dynseg import scalespace as ss


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--channels", type=int, default=64)
    parser.add_argument("--sigma-max", type=float, default=2.0)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    shape = (1, args.channels, args.size, args.size)
    field = rng.standard_normal(shape).astype(np.float32)
    grad = rng.standard_normal(shape).astype(np.float32)
    sigma = ss.SIGMA_MIN + rng.random((1, 1, args.size, args.size)) * (args.sigma_max - ss.SIGMA_MIN)

    results = {}
    for name in _backend.available():
        kernels = _backend.load(name)
        fwd = best_time(lambda: ss.adaptive_smooth(field, sigma, backend=kernels), args.repeats)
        bwd = best_time(lambda: ss.adaptive_smooth_backward(grad, field, sigma, backend=kernels), args.repeats)
        results[name] = (fwd, bwd)
        print(f"{name:>7}: forward {fwd * 1e3:9.2f} ms   backward {bwd * 1e3:9.2f} ms")
    if len(results) == 2:
        (cf, cb), (pf, pb) = results["cython"], results["python"]
        print(f"speedup: forward {pf / cf:.1f}x   backward {pb / cb:.1f}x")
    else:
        print("compiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
