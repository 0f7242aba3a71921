"""Compiled vs numpy scatter kernels on pooling-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the comparison does not depend on
``BEVDISTILL_PURE_PYTHON``. Each row reports the best-of-N wall time and
checks that the two backends agree bitwise.
"""
import argparse
import time

import numpy as np

from bevdistill import _kernels_py

try:
    from bevdistill import _kernels as _compiled
except ImportError:
    _compiled = None

# (frustum points, channels, BEV cells): one camera at the lifting scale, the
# full six-camera rig, and a LiDAR sweep rasterised into the pseudo-label grid
WORKLOADS = [
    ("one camera", 22 * 8 * 32, 32, 32 * 32),
    ("six cameras", 6 * 22 * 8 * 32, 32, 32 * 32),
    ("lidar sweep", 40_000, 16, 32 * 32),
]


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled kernels are not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'workload':14s} {'kernel':16s} {'numpy ms':>10s} {'compiled ms':>12s} {'speed-up':>9s}  identical")
    for name, n, c, cells in WORKLOADS:
        index = rng.integers(-1, cells, size=n).astype(np.int64)
        values = rng.normal(size=(n, c))
        scalars = rng.normal(size=n)
        cases = [
            ("scatter_add_rows", lambda m: m.scatter_add_rows(index, values, cells)),
            ("bincount_rows", lambda m: m.bincount_rows(index, cells)),
            ("scatter_min", lambda m: m.scatter_min(index, scalars, cells)),
        ]
        for kname, call in cases:
            t_py, out_py = best_time(lambda: call(_kernels_py), args.repeat)
            if _compiled is None:
                print(f"{name:14s} {kname:16s} {t_py * 1e3:10.2f} {'-':>12s} {'-':>9s}  -")
                continue
            t_c, out_c = best_time(lambda: call(_compiled), args.repeat)
            same = out_py.tobytes() == out_c.tobytes()
            print(f"{name:14s} {kname:16s} {t_py * 1e3:10.2f} {t_c * 1e3:12.2f} {t_py / t_c:8.1f}x  {same}")


if __name__ == "__main__":
    main()
