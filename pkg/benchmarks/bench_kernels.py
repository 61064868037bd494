"""Time each hot kernel on the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The numba column excludes compilation (one warm-up call per kernel).
"""
import argparse
import json
import time

import numpy as np

from battpinn import kernels


def _cases(rng):
    n = 20_000
    x = rng.standard_normal(n)
    grid = np.sort(rng.uniform(0.0, 1.0, 1000))
    curve = np.cumsum(rng.uniform(0.1, 1.0, 1000))
    q = 1.1 - 1e-4 * np.arange(800) - 1e-8 * np.arange(800) ** 2
    times = np.arange(1.0, 2001.0)
    theta = np.array([2e-4, 1e-3, 0.4, 4e-3, 1.0, 2e-6])
    logistic = np.array([0.01, 0.5, 0.05])
    p, g = rng.standard_normal(128 * 128), rng.standard_normal(128 * 128)
    return {
        "trailing_mean": lambda b: b.trailing_mean(x, 10),
        "centered_mean": lambda b: b.centered_mean(x, 5),
        "gradient": lambda b: b.gradient(curve, grid),
        "quadratic_trend": lambda b: b.quadratic_trend(q),
        "rk4_logistic_5000": lambda b: b.rk4_builtin(kernels.RATE_LOGISTIC, logistic, 0.1, 0.1, 5000),
        "sp_rates_2000": lambda b: b.sp_rates(times, theta),
        "adam_16k": lambda b: b.adam(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                     1e-3, 0.9, 0.999, 1e-8, 1),
    }


def _best(fn, backend, repeat):
    fn(backend)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(backend)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json")
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [kernels.NUMPY] + ([kernels.NUMBA] if kernels.HAVE_NUMBA else [])
    rows = []
    for name, fn in _cases(rng).items():
        row = {"kernel": name}
        for b in backends:
            row[b.name] = _best(fn, b, args.repeat)
        rows.append(row)
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for row in rows:
        nb = row.get("numba", float("nan"))
        print(f"{row['kernel']:<20}{1e3 * row['numpy']:>12.3f}{1e3 * nb:>12.3f}"
              f"{row['numpy'] / nb:>10.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
