"""Compare the compiled kernel backend against the numpy fallback.

Times the five hot kernels on synthetic CSR problems of growing size and
prints one table row per (kernel, size) pair with both backends and the
speedup. The compiled extension is loaded directly so the comparison works
regardless of which backend the installed package selected at import time.

Usage:
    python3 benchmarks/bench_kernels.py [--sizes 200,1000,5000] [--repeats 20]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from dyneq import _kernels_numpy

try:
    from dyneq import _fastcsr
except ImportError:
    _fastcsr = None


def make_csr(n, avg_degree, rng):
    """Random CSR arrays with about avg_degree entries per row."""
    counts = rng.poisson(avg_degree, size=n).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    indices = rng.integers(0, n, size=nnz, dtype=np.int64)
    data = rng.standard_normal(nnz)
    return indptr, indices, data


def bench_case(impl, name, n, d, rng, repeats):
    """Best-of-repeats wall time in microseconds for one kernel."""
    indptr, indices, data = make_csr(n, 8.0, rng)
    B = rng.standard_normal((n, d))
    out = np.zeros_like(B)
    z = rng.standard_normal((d, n))
    s = rng.standard_normal((d, n))
    prop = rng.standard_normal((n, d))
    prev = rng.standard_normal((n, d))
    scale = rng.standard_normal(n)

    runs = {
        "csr_matmat": lambda: impl.csr_matmat(indptr, indices, data, B, out),
        "maxabs_diff": lambda: impl.maxabs_diff(z, s),
        "damped_update": lambda: impl.damped_update(z.copy(), s, 0.5),
        "row_scale_add_diff": lambda: impl.row_scale_add_diff(prop.copy(), scale, B, prev),
        "row_scale_diff": lambda: impl.row_scale_diff(prop.copy(), scale, prev),
    }
    return min(timeit.repeat(runs[name], number=1, repeat=repeats)) * 1e6


KERNELS = ["csr_matmat", "maxabs_diff", "damped_update", "row_scale_add_diff", "row_scale_diff"]


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="200,1000,5000",
                        help="comma-separated node counts")
    parser.add_argument("--dim", type=int, default=16, help="embedding width")
    parser.add_argument("--repeats", type=int, default=20,
                        help="timing repeats; the minimum is reported")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if _fastcsr is None:
        print("compiled extension not built; showing numpy-only timings")
    header = f"{'kernel':<20} {'n':>6} {'numpy us':>10} {'cython us':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    with threadpool_limits(limits=1):
        for name in KERNELS:
            for n in sizes:
                rng = np.random.default_rng(n)
                t_np = bench_case(_kernels_numpy, name, n, args.dim, rng, args.repeats)
                if _fastcsr is not None:
                    rng = np.random.default_rng(n)
                    t_cy = bench_case(_fastcsr, name, n, args.dim, rng, args.repeats)
                    print(f"{name:<20} {n:>6} {t_np:>10.1f} {t_cy:>10.1f} {t_np / t_cy:>7.1f}x")
                else:
                    print(f"{name:<20} {n:>6} {t_np:>10.1f} {'-':>10} {'-':>8}")
