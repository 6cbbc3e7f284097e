"""Compare the numba and pure-numpy paths of the linalg kernels.

    python benchmarks/bench_kernels.py [--sizes 16 32 64 128] [--repeat 5]

The numba path is timed after a warm-up call so compilation is excluded.
Both paths must agree on singular values and reconstructions.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fedlora._jit import HAVE_NUMBA
from fedlora.linalg import gram_schmidt_qr, svd


def _best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench(sizes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10}{'size':>6}{'numpy [ms]':>14}{'numba [ms]':>14}{'speedup':>10}{'max |dsigma|':>16}")
    for size in sizes:
        # residual-like input: rank 12 plus full-rank noise
        m = rng.normal(size=(size, 12)) @ rng.normal(size=(12, size)) + 1e-3 * rng.normal(size=(size, size))
        for name, kernel in (("svd", svd), ("mgs-qr", gram_schmidt_qr)):
            t_np = _best_time(lambda: kernel(m, use_jit=False), repeat)
            ref = kernel(m, use_jit=False)
            if HAVE_NUMBA:
                kernel(m, use_jit=True)
                t_jit = _best_time(lambda: kernel(m, use_jit=True), repeat)
                out = kernel(m, use_jit=True)
                if name == "svd":
                    diff = float(np.max(np.abs(out.sigma - ref.sigma)))
                else:
                    diff = float(np.max(np.abs(out[0] @ out[1] - ref[0] @ ref[1])))
                print(f"{name:<10}{size:>6}{t_np * 1e3:>14.3f}{t_jit * 1e3:>14.3f}{t_np / t_jit:>10.1f}{diff:>16.2e}")
            else:
                print(f"{name:<10}{size:>6}{t_np * 1e3:>14.3f}{'n/a':>14}{'':>10}{'':>16}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 128])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    bench(args.sizes, args.repeat)


if __name__ == "__main__":
    main()
