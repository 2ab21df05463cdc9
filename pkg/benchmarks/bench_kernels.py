"""Time the compiled and numpy convolution kernels on PAM-sized grids.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (backend, case) with the median forward and backward
time in milliseconds, then the compiled/numpy speed-up.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from migen import kernels

CASES = [
    # (grid side, channels, kernel, depthwise)
    (8, 64, 3, True),
    (8, 64, 7, True),
    (8, 64, 13, True),
    (15, 64, 13, True),
    (23, 512, 3, True),
    (8, 16, 3, False),
]


def _median_ms(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def run(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for side, c, k, dw in CASES:
        x = rng.normal(size=(side, side, c))
        w = rng.normal(size=(k, k, c) if dw else (k, k, c, c))
        b = rng.normal(size=c)
        g = rng.normal(size=(side, side, c))
        for backend in kernels.available_backends():
            prev = kernels.use_backend(backend)
            try:
                if dw:
                    fwd = lambda: kernels.dwconv_forward(x, w, b)
                    bwd = lambda: kernels.dwconv_backward(x, w, g)
                else:
                    fwd = lambda: kernels.conv_forward(x, w, b)
                    bwd = lambda: kernels.conv_backward(x, w, g)
                rows.append({"backend": backend, "case": f"{side}x{side}x{c} k{k} {'dw' if dw else 'full'}",
                             "forward_ms": _median_ms(fwd, repeat), "backward_ms": _median_ms(bwd, repeat)})
            finally:
                kernels.use_backend(prev)
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rows = run(args.repeat)
    print(f"{'backend':<10} {'case':<24} {'fwd ms':>9} {'bwd ms':>9}")
    for r in rows:
        print(f"{r['backend']:<10} {r['case']:<24} {r['forward_ms']:9.3f} {r['backward_ms']:9.3f}")
    by_case: dict[str, dict] = {}
    for r in rows:
        by_case.setdefault(r["case"], {})[r["backend"]] = r
    if "compiled" in kernels.available_backends():
        print()
        for case, pair in by_case.items():
            c, p = pair["compiled"], pair["python"]
            print(f"{case:<24} speed-up fwd {p['forward_ms'] / c['forward_ms']:6.2f}x  "
                  f"bwd {p['backward_ms'] / c['backward_ms']:6.2f}x")


if __name__ == "__main__":
    main()
