"""Compare the compiled convolution kernels against the numpy fallback.

Times conv3d forward and forward+backward on layer shapes taken from the
two model presets, once per backend, and prints the speedup. Run from the
repository root:

    python3 benchmarks/bench_conv.py [--repeats 5] [--large]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from qcnet import backend, ops
from qcnet.tensor import Tensor

CASES = [
    # name, x shape, w shape, stride, padding
    ("stem desk-32", (5, 1, 24, 32, 32), (24, 1, 3, 3, 3), 2, 1),
    ("block conv desk-32", (5, 24, 12, 16, 16), (12, 24, 3, 3, 3), 1, 1),
    ("transition 1x1", (5, 48, 12, 16, 16), (24, 48, 1, 1, 1), 1, 0),
]

LARGE_CASES = [
    ("stem paper-96", (1, 1, 70, 96, 96), (24, 1, 3, 3, 3), 2, 1),
    ("block conv paper-96", (1, 24, 35, 48, 48), (12, 24, 3, 3, 3), 1, 1),
]


def time_case(x, w, b, stride, pad, repeats):
    fwd, both = [], []
    for _ in range(repeats):
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        t0 = time.perf_counter()
        out = ops.conv3d(xt, wt, bt, stride=stride, zero_padding=pad)
        t1 = time.perf_counter()
        out.backward(np.ones(out.shape, dtype=np.float32))
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        both.append(t2 - t0)
    return statistics.median(fwd), statistics.median(both)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed runs per case")
    ap.add_argument("--large", action="store_true",
                    help="also time full-resolution preset shapes")
    args = ap.parse_args()

    cases = CASES + (LARGE_CASES if args.large else [])
    backends = ["python"] + (["compiled"] if backend.HAVE_COMPILED else [])
    if not backend.HAVE_COMPILED:
        print("note: compiled extension not built, timing the fallback only")

    rng = np.random.default_rng(0)
    header = f"{'case':<22} {'backend':<9} {'fwd ms':>9} {'fwd+bwd ms':>11}"
    print(header)
    print("-" * len(header))
    for name, xs, ws, stride, pad in cases:
        x = rng.standard_normal(xs).astype(np.float32)
        w = (0.1 * rng.standard_normal(ws)).astype(np.float32)
        b = np.zeros(ws[0], dtype=np.float32)
        results = {}
        for be in backends:
            backend.use(be)
            time_case(x, w, b, stride, pad, 1)  # warmup
            results[be] = time_case(x, w, b, stride, pad, args.repeats)
            print(f"{name:<22} {be:<9} {1e3 * results[be][0]:>9.2f} "
                  f"{1e3 * results[be][1]:>11.2f}")
        if len(results) == 2:
            speed = results["python"][1] / results["compiled"][1]
            print(f"{'':<22} {'speedup':<9} {'':>9} {speed:>10.1f}x")
    backend.use("compiled" if backend.HAVE_COMPILED else "python")


if __name__ == "__main__":
    main()
