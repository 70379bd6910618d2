"""Time the compiled convolution kernels against the numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--fp 32|64] [--repeats N]

Each case is run --repeats times per backend and the best wall time is
reported, plus the compiled/numpy speedup. Forward results are checked
bitwise-equal between backends before timing so a broken build cannot
post numbers.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from voxpar import kernels

# (label, n, cin, cout, extent, kernel, stride)
CASES = [
    ("conv 16^3 k3", 2, 16, 32, 16, 3, 1),
    ("conv 32^3 k3", 1, 4, 16, 32, 3, 1),
    ("conv 32^3 k3 s2", 1, 16, 32, 32, 3, 2),
    ("conv 8^3 k3 wide", 2, 64, 128, 8, 3, 1),
]


def _inputs(n, cin, cout, extent, kernel, stride, dtype):
    rng = np.random.default_rng(0)
    pad = extent + kernel - 1  # "same" padding for odd kernels
    xpad = rng.standard_normal((n, cin, pad, pad, pad)).astype(dtype)
    w = rng.standard_normal((cout, cin, kernel, kernel, kernel)).astype(dtype)
    out = (pad - kernel) // stride + 1
    u = rng.standard_normal((n, cout, out, out, out)).astype(dtype)
    return xpad, w, u


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fp", type=int, default=32, choices=(32, 64))
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    dtype = np.float32 if args.fp == 32 else np.float64

    names = kernels.available_backends()
    if "cython" not in names:
        print("compiled backend unavailable; timing numpy only")
    backends = [(n, kernels.get_backend(n)) for n in names]

    print(f"dtype fp{args.fp}, best of {args.repeats}")
    print(f"{'case':20s} {'op':10s} " +
          " ".join(f"{n + ' [ms]':>12s}" for n, _ in backends) +
          ("  speedup" if len(backends) > 1 else ""))
    for label, n, cin, cout, extent, kernel, stride in CASES:
        xpad, w, u = _inputs(n, cin, cout, extent, kernel, stride, dtype)
        st = (stride,) * 3
        ops = {
            "fwd": lambda be: be.conv3d_fwd(xpad, w, st),
            "bwd_data": lambda be: be.conv3d_bwd_data(u, w, st, xpad.shape[2:]),
            "bwd_filter": lambda be: be.conv3d_bwd_filter(xpad, u, st, w.shape[2:]),
        }
        ref = None
        for name, be in backends:
            got = be.conv3d_fwd(xpad, w, st)
            if ref is None:
                ref = got
            elif not np.array_equal(ref, got):
                raise SystemExit(f"{label}: {name} forward disagrees bitwise")
        for op, fn in ops.items():
            times = [_best(lambda be=be: fn(be), args.repeats)
                     for _, be in backends]
            row = f"{label:20s} {op:10s} " + \
                  " ".join(f"{t * 1e3:12.3f}" for t in times)
            if len(times) > 1:
                # backends sort as [cython, numpy]; report numpy/cython
                row += f"  {times[-1] / times[0]:7.1f}x"
            print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
