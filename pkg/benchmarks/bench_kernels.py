"""Compiled vs pure-Python DMD acquisition.

    python benchmarks/bench_kernels.py [--batch 4] [--kernels 192] [--bands 64]

Times ``acquire_batch`` from both backends on the same inputs at a dense
mask and at 10% retention, and checks the outputs agree bitwise.
"""

import argparse
import time

import numpy as np

from lumvit import _dmd_py
from lumvit.dmd import BinaryKernelBank

try:
    from lumvit import _dmd_core
except ImportError:
    _dmd_core = None


def best_of(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--kernels", type=int, default=192)
    p.add_argument("--bands", type=int, default=64)
    p.add_argument("--patch", type=int, default=9)
    p.add_argument("--grid", type=int, default=3, help="patches per side")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    K, C, ch = args.patch, args.kernels, args.bands
    N = args.grid ** 2
    side = K * args.grid
    bank = BinaryKernelBank.from_weights(rng.standard_normal((C, K, K)), rng.standard_normal((C, ch)))
    images = rng.standard_normal((args.batch, side, side, ch))

    print(f"batch {args.batch}, {side}x{side}x{ch} images, {C} kernels of {K}x{K}, {N} patches")
    if _dmd_core is None:
        print("compiled core not built; only the Python loops are timed")
    for rate in (1.0, 0.1):
        D = (rng.random((N, C)) < rate).astype(np.uint8)
        ops = args.batch * int(D.sum())
        call = (images, bank.bits, bank.scales, bank.spectral, D)
        t_py, (y_py, n_py) = best_of(lambda: _dmd_py.acquire_batch(*call), max(1, args.repeats // 3))
        line = f"retain {rate:4.0%}: {ops:7d} DMD ops | python {t_py * 1e3:9.1f} ms"
        if _dmd_core is not None:
            t_c, (y_c, n_c) = best_of(lambda: _dmd_core.acquire_batch(*call), args.repeats)
            same = np.array_equal(y_c, y_py) and n_c == n_py
            line += f" | cython {t_c * 1e3:8.2f} ms | speedup {t_py / t_c:7.1f}x | bitwise equal: {same}"
        print(line)


if __name__ == "__main__":
    main()
