"""Compare the compiled and pure-Python kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``.
"""
import argparse
import timeit

import numpy as np

from survey_disagg import kernels


def cases(n_cells, n_points):
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 1, n_cells)
    n_pos = rng.integers(0, 30, n_cells)
    n_neg = rng.integers(0, 30, n_cells)
    theta = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    ring = np.column_stack([np.cos(theta) * (1 + 0.3 * np.sin(5 * theta)), np.sin(theta) * (1 + 0.3 * np.sin(5 * theta))])
    ring = np.vstack([ring, ring[:1]])
    pts = rng.uniform(-1.5, 1.5, (n_points, 2))
    return {
        "tn_sums (exact)": lambda b: kernels.tn_sums(mu, n_pos, n_neg, np.random.default_rng(1), backend=b),
        "points_in_rings": lambda b: kernels.points_in_rings(pts, [ring], backend=b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=1000)
    ap.add_argument("--points", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels._compiled is not None else [])
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(args.cells, args.points).items():
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends]
        line = f"{name:<18}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
