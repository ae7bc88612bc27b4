"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from qdistill import _pykernels

try:
    from qdistill import _ckernels
except ImportError:
    _ckernels = None

# (name, x shape, w shape): LeNet forward and backward correlations at batch 64
CONV_CASES = [
    ("conv1 forward", (64, 1, 32, 32), (6, 1, 5, 5)),
    ("conv2 forward", (64, 6, 14, 14), (16, 6, 5, 5)),
    ("conv2 input grad", (64, 16, 18, 18), (6, 16, 5, 5)),
    ("conv2 weight grad", (6, 64, 14, 14), (16, 64, 10, 10)),
    ("conv1 weight grad", (1, 64, 32, 32), (6, 64, 28, 28)),
]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'case':<22}" + "".join(f"{name:>12}" for name, _ in backends) + ("     speedup" if _ckernels else ""))

    rows = []
    for name, xs, ws in CONV_CASES:
        x, w = rng.normal(size=xs), rng.normal(size=ws)
        rows.append((name, [best(lambda m=m: m.correlate2d(x, w), args.repeat) for _, m in backends]))

    state = (rng.normal(size=64) + 1j * rng.normal(size=64)).astype(complex)
    u = np.linalg.qr(rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)))[0]

    def gates(m):
        s = state.copy()
        for _ in range(3):
            for q in range(6):
                m.apply_1q(s, q, 6, u)
            for q in range(6):
                m.apply_cnot(s, q, (q + 1) % 6, 6)

    rows.append(("3-layer 6-qubit circuit", [best(lambda m=m: gates(m), args.repeat * 20) for _, m in backends]))

    for name, times in rows:
        line = f"{name:<22}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            line += f"  {times[0] / times[1]:>9.2f}x"
        print(line)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
