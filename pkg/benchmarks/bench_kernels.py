"""Time the compiled and numpy kernel backends on the same inputs.

    python3 benchmarks/bench_kernels.py [--size 1000000] [--repeat 5]

Each row reports the best wall time per backend, the speedup of the compiled
core, and whether the two outputs are bit-identical.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from taskforge.kernels import available_backends


def best_of(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    return a == b


def cases(size: int):
    g = np.random.default_rng(0)
    x = g.standard_normal(size).astype(np.float32)
    y = g.standard_normal(size).astype(np.float32)
    stack = g.standard_normal((5, size))
    stack[np.abs(stack) < 0.5] = 0.0
    max_abs = float(np.abs(x).max())
    return {
        "uniform_block": lambda k: k.uniform_block(12345, 0, size),
        "dare_sparsify": lambda k: k.dare_sparsify(x, 12345, 0.9),
        "della_sparsify": lambda k: k.della_sparsify(x, 12345, 0.6, max_abs),
        "ties_elect_merge": lambda k: k.ties_elect_merge(stack),
        "sign_agree_count": lambda k: k.sign_agree_count(x, y),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available", file=sys.stderr)
    names = sorted(backends, key=lambda n: n != "python")
    header = f"{'kernel':<18}" + "".join(f"{n + ' (ms)':>15}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}{'identical':>11}"
    print(f"n = {args.size:,}, best of {args.repeat}")
    print(header)
    for kernel, call in cases(args.size).items():
        times, outs = [], []
        for n in names:
            t, out = best_of(lambda: call(backends[n]), args.repeat)
            times.append(t)
            outs.append(out)
        row = f"{kernel:<18}" + "".join(f"{1e3 * t:>15.2f}" for t in times)
        if len(names) == 2:
            row += f"{times[0] / times[1]:>9.1f}x{str(same(outs[0], outs[1])):>11}"
        print(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
