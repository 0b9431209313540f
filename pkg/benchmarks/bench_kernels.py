"""Timing of the basis evaluation kernels: compiled extension vs numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--points 3000] [--k 300 1000] [--repeat 3]

Each row reports the best of ``--repeat`` runs for the summed field with its
Jacobian (the inner loop of integration and of Jacobian propagation) and for
the per-entry table used by the Gauss-Newton step.
"""

import argparse
import time

import numpy as np

from morphflow import kernels
from morphflow.basis import enumerate_basis


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def run(points, ks, repeat, threads):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (points, 3))
    rows = []
    for k in ks:
        basis = enumerate_basis(3, k)
        a = rng.standard_normal(k) * np.sqrt(basis.kl_weights)
        results = {}
        for name in kernels.available_backends():
            t_field = _best(lambda: kernels.field(x, basis.freqs, basis.src, basis.sgn, a, True,
                                                  backend=name, threads=threads), repeat)
            t_table = _best(lambda: kernels.basis(x, basis.freqs, basis.src, basis.sgn,
                                                  backend=name, threads=threads), repeat)
            results[name] = (t_field, t_table)
        rows.append((k, results))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--points", type=int, default=3000)
    parser.add_argument("--k", type=int, nargs="+", default=[100, 300, 1000])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--threads", type=int, default=None, help="0 = all cores")
    args = parser.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"N={args.points} points, threads={kernels.resolve_threads(args.threads)}")
    header = f"{'K':>6}  {'backend':>8}  {'field+jac [s]':>14}  {'table [s]':>10}"
    print(header)
    print("-" * len(header))
    for k, results in run(args.points, args.k, args.repeat, args.threads):
        for name in backends:
            t_field, t_table = results[name]
            print(f"{k:>6}  {name:>8}  {t_field:>14.4f}  {t_table:>10.4f}")
        if "cython" in results:
            speed = results["python"][0] / results["cython"][0]
            print(f"{'':>6}  {'speedup':>8}  {speed:>13.1f}x  "
                  f"{results['python'][1] / results['cython'][1]:>9.1f}x")


if __name__ == "__main__":
    main()
