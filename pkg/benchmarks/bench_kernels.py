"""Compare the compiled kernel backend against the numpy fallback.

Run from a checkout:

    python3 benchmarks/bench_kernels.py [--repeats 5]

Times the four hot kernels on convolution-shaped workloads and a whole
forward/backward step of the backbone's first stage sizes, then prints a
per-kernel speedup table. Both backends must agree bitwise; this script
asserts that before timing anything.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cmoe._kernels import _npkernels

try:
    from cmoe._kernels import _cykernels
except ImportError:
    _cykernels = None


CASES = [
    # (name, n, c, h, w, kh, stride, pad) roughly the stem and stage-1 shapes
    ("stem 7x7/2", 4, 1, 128, 128, 7, 2, 3),
    ("stage1 3x3", 4, 64, 32, 32, 3, 1, 1),
    ("stage2 3x3/2", 4, 64, 32, 32, 3, 2, 1),
    ("small 3x3", 16, 8, 16, 16, 3, 1, 1),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(mod, repeats):
    rng = np.random.default_rng(0)
    rows = {}
    for name, n, c, h, w, k, stride, pad in CASES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        cols = mod.im2col(x, k, k, stride, pad)
        rows[f"im2col {name}"] = _time(lambda: mod.im2col(x, k, k, stride, pad), repeats)
        rows[f"col2im {name}"] = _time(
            lambda: mod.col2im(cols, n, c, h, w, k, k, stride, pad), repeats)
        out, idx = mod.maxpool2d_forward(x, 2, 2, 0)
        g = rng.standard_normal(out.shape).astype(np.float32)
        rows[f"maxpool fwd {name}"] = _time(lambda: mod.maxpool2d_forward(x, 2, 2, 0), repeats)
        rows[f"maxpool bwd {name}"] = _time(lambda: mod.maxpool2d_backward(g, idx, h, w), repeats)
    return rows


def check_agreement():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 5, 17, 13)).astype(np.float32)
    a = _npkernels.im2col(x, 3, 3, 2, 1)
    b = _cykernels.im2col(x, 3, 3, 2, 1)
    assert np.array_equal(a, b), "im2col mismatch"
    ra = _npkernels.col2im(a, 3, 5, 17, 13, 3, 3, 2, 1)
    rb = _cykernels.col2im(b, 3, 5, 17, 13, 3, 3, 2, 1)
    assert np.array_equal(ra, rb), "col2im mismatch"
    oa, ia = _npkernels.maxpool2d_forward(x, 3, 2, 1)
    ob, ib = _cykernels.maxpool2d_forward(x, 3, 2, 1)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib), "maxpool fwd mismatch"
    g = rng.standard_normal(oa.shape).astype(np.float32)
    ga = _npkernels.maxpool2d_backward(g, ia, 17, 13)
    gb = _cykernels.maxpool2d_backward(g, ib, 17, 13)
    assert np.array_equal(ga, gb), "maxpool bwd mismatch"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if _cykernels is None:
        print("compiled backend not built; only timing the numpy fallback")
        for name, t in bench_backend(_npkernels, args.repeats).items():
            print(f"{name:28s} {t * 1e3:9.3f} ms")
        return
    check_agreement()
    print("bitwise agreement: ok\n")
    np_rows = bench_backend(_npkernels, args.repeats)
    cy_rows = bench_backend(_cykernels, args.repeats)
    print(f"{'kernel':28s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for name in np_rows:
        tn, tc = np_rows[name], cy_rows[name]
        print(f"{name:28s} {tn * 1e3:9.3f}ms {tc * 1e3:9.3f}ms {tn / tc:7.2f}x")


if __name__ == "__main__":
    main()
