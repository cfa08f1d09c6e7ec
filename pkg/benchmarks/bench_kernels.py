"""Time the numba and numpy conv kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--dtype float32]

Prints one row per shape with median forward and backward times for each
path and the numpy/numba ratio.  The first numba call (JIT compile or cache
load) is excluded.
"""
import argparse
import statistics
import time

import numpy as np

from slseg import kernels
from slseg._accel import HAVE_NUMBA

SHAPES = [
    # N, C_in, H, W, C_out, k, stride, pad
    (4, 1, 16, 16, 8, 3, 1, 1),
    (4, 8, 16, 16, 8, 3, 1, 1),
    (4, 16, 8, 8, 16, 3, 1, 1),
    (2, 16, 32, 32, 32, 3, 1, 1),
    (2, 8, 32, 32, 8, 3, 2, 1),
]


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--dtype", default="float32")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path can run")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape':<34}{'fwd numba':>11}{'fwd numpy':>11}{'x':>6}{'bwd numba':>11}{'bwd numpy':>11}{'x':>6}")
    for n, c, h, w, k, ks, s, p in SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(args.dtype)
        wt = rng.standard_normal((k, c, ks, ks)).astype(args.dtype)
        b = rng.standard_normal(k).astype(args.dtype)
        y = kernels.conv2d_forward_numpy(x, wt, b, s, p)
        g = rng.standard_normal(y.shape).astype(args.dtype)
        ref = kernels.conv2d_forward_numba(x, wt, b, s, p)   # warm-up / compile
        kernels.conv2d_backward_numba(g, x, wt, s, p)
        assert np.allclose(ref, y, rtol=1e-4, atol=1e-4), "kernel paths disagree"
        row = []
        for fwd_bwd in ("forward", "backward"):
            for path in ("numba", "numpy"):
                fn = getattr(kernels, f"conv2d_{fwd_bwd}_{path}")
                call = (lambda f=fn: f(x, wt, b, s, p)) if fwd_bwd == "forward" else (lambda f=fn: f(g, x, wt, s, p))
                row.append(median_time(call, args.repeats))
        label = f"{n}x{c}x{h}x{w} -> {k} k{ks} s{s} p{p}"
        print(f"{label:<34}{row[0] * 1e3:>9.3f}ms{row[1] * 1e3:>9.3f}ms{row[1] / row[0]:>6.2f}"
              f"{row[2] * 1e3:>9.3f}ms{row[3] * 1e3:>9.3f}ms{row[3] / row[2]:>6.2f}")
    print(f"active backend at import: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
