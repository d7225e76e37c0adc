"""Time the compiled and numpy grouped-reduction kernels on the same inputs.

Usage::

    python3 benchmarks/bench_kernels.py [--K 2000] [--n 30] [--p 16] [--repeat 20]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from npjive import _kernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--K", type=int, default=2000)
    ap.add_argument("--n", type=int, default=30)
    ap.add_argument("--p", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    N = args.K * args.n
    cell = np.repeat(np.arange(args.K), args.n)
    fold = rng.integers(0, 2, N)
    F = rng.standard_normal((N, args.p))
    y = rng.standard_normal(N)
    bins = rng.integers(0, args.p, N)

    backends = ["python"] + (["cython"] if _kernels.cython_available() else [])
    cases = {
        "fold_sums": lambda b: _kernels.fold_sums(F, cell, fold, args.K, 2, backend=b),
        "fold_sums_1d": lambda b: _kernels.fold_sums_1d(y, cell, fold, args.K, 2, backend=b),
        "histogram_fold_counts": lambda b: _kernels.histogram_fold_counts(bins, cell, fold, args.K, 2,
                                                                          args.p, backend=b),
    }
    print(f"N={N} K={args.K} p={args.p}; best of {args.repeat} (ms)")
    print(f"{'kernel':<24}" + "".join(f"{b:>10}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in cases.items():
        ref = fn("python")
        times = []
        for b in backends:
            out = fn(b)
            for r, o in zip(ref if isinstance(ref, tuple) else (ref,), out if isinstance(out, tuple) else (out,)):
                assert np.allclose(r, o, rtol=1e-12, atol=1e-9), f"{name}: backends disagree"
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3)
        line = f"{name:<24}" + "".join(f"{t:>10.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
