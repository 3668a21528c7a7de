"""Compare the compiled conv kernels against the numpy im2col fallback.

Usage: python benchmarks/bench_conv.py [--repeats N]
"""

import argparse
import time

import numpy as np

from cfsam import backend

CASES = [
    # (H, W, Cin, Cout, k) drawn from the six-scale detection pyramid
    (38, 38, 512, 512, 3),
    (19, 19, 1024, 1024, 3),
    (10, 10, 512, 512, 3),
    (38, 38, 512, 256, 1),
    (5, 5, 256, 256, 3),
]


def time_backend(name, x, w, b, padding, repeats):
    fwd, bwd = backend.get_backend(name)
    fwd(x, w, b, padding, 1)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fwd(x, w, b, padding, 1)
        best = min(best, time.perf_counter() - t0)
    # backward timing on a matching upstream gradient
    g = np.ones_like(out)
    t0 = time.perf_counter()
    bwd(x, w, g, padding, 1)
    bwd_s = time.perf_counter() - t0
    return best, bwd_s, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    args = ap.parse_args()

    names = backend.available_backends()
    print(f"backends: {', '.join(names)} (active: {backend.ACTIVE_BACKEND})")
    print(f"{'case':<24}" + "".join(f"{n + ' fwd':>12}{n + ' bwd':>12}" for n in names) + f"{'max |diff|':>12}")

    rng = np.random.default_rng(0)
    dt = np.float32 if args.dtype == "f32" else np.float64
    for h, w_, ci, co, k in CASES:
        x = rng.standard_normal((h, w_, ci)).astype(dt)
        wgt = rng.standard_normal((k, k, ci, co)).astype(dt) / np.sqrt(k * k * ci)
        bias = np.zeros(co, dtype=dt)
        row = f"{h}x{w_}x{ci}->{co} k{k}"
        outs = []
        cells = []
        for n in names:
            fwd_s, bwd_s, out = time_backend(n, x, wgt, bias, k // 2, args.repeats)
            outs.append(out)
            cells.append(f"{fwd_s:>11.3f}s{bwd_s:>11.3f}s")
        diff = max(
            float(np.max(np.abs(outs[0] - o))) for o in outs[1:]
        ) if len(outs) > 1 else 0.0
        print(f"{row:<24}" + "".join(cells) + f"{diff:>12.2e}")


if __name__ == "__main__":
    main()
