"""Compiled vs numpy kernels on desk-scale inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--threads 1]

Prints the median wall time of each kernel on both backends and checks
that their outputs agree.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from bayeseg import _pykernels, kernels

try:
    from bayeseg import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def _time(fn, repeat):
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t)
    return statistics.median(ts), out


def cases(rng):
    n = 64 ** 3
    logw = rng.normal(0.0, 3.0, (n, 31))
    logw[:, ::7] = -np.inf
    u = rng.random(n)
    mask = np.ascontiguousarray((rng.random((64, 64, 64)) < 0.3).astype(np.uint8))
    a = rng.normal(size=(3000, 3))
    b = rng.normal(size=(3000, 3))
    return {
        "counter_uniform (262144)": lambda m, t: m.counter_uniform(0x1234ABCD, 0, n, t),
        "categorical (262144 x 31)": lambda m, t: m.categorical(logw, u, t),
        "neighbor_count26 (64^3)": lambda m, t: m.neighbor_count26(mask, t),
        "min_distances (3000 x 3000)": lambda m, t: m.min_distances(a, b, t),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--threads", type=int, default=kernels.get_threads())
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s}  agree")
    for name, fn in cases(rng).items():
        tp, op = _time(lambda: fn(_pykernels, args.threads), args.repeat)
        if _ckernels is None:
            print(f"{name:32s} {1e3 * tp:12.2f} {'-':>12s} {'-':>8s}")
            continue
        tc, oc = _time(lambda: fn(_ckernels, args.threads), args.repeat)
        same = np.allclose(np.asarray(op, dtype=np.float64), np.asarray(oc, dtype=np.float64), rtol=0, atol=1e-12)
        print(f"{name:32s} {1e3 * tp:12.2f} {1e3 * tc:12.2f} {tp / tc:8.1f}  {same}")


if __name__ == "__main__":
    main()
