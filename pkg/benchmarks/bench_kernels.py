"""Time the compiled and NumPy integration kernels on the same workloads.

Run with ``python benchmarks/bench_kernels.py``.  Each workload integrates a
fixed number of steps with convergence detection disabled, so both backends
do identical work; the final states are compared before timings are printed.
"""
import argparse
import time

import numpy as np

from analog_dam import kernels
from analog_dam.core import make_rng

WORKLOADS = [
    # (label, N_v, N_h, adiabatic, method, steps)
    ("xor-size full euler", 3, 4, False, 0, 20000),
    ("hamming-size full euler", 7, 16, False, 0, 20000),
    ("N=64 adiabatic euler", 64, 64, True, 0, 5000),
    ("N=256 adiabatic euler", 256, 256, True, 0, 2000),
    ("N=64 full rk4", 64, 64, False, 1, 2000),
]


def _args(n_v, n_h, adiabatic, seed=0):
    rng = make_rng(seed)
    xi = np.abs(rng.normal(size=(n_h, n_v)))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    b = -0.5 * np.sum(xi**2, axis=1)
    return (xi, np.zeros(n_v), b, 1.0, 0.0 if adiabatic else 0.1, 2.0, 0, n_h, 0)


def bench(advance, args, n_v, n_h, method, steps, dt, repeats):
    best = np.inf
    for _ in range(repeats):
        v = np.full(n_v, 0.5)
        h = np.zeros(n_h)
        free = np.ones(n_v)
        t0 = time.perf_counter()
        advance(*args, v, h, free, dt, steps, method, 0.0)
        best = min(best, time.perf_counter() - t0)
    return best, v


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    opts = parser.parse_args()
    py = kernels.get_advance("python")
    try:
        cy = kernels.get_advance("cython")
    except ImportError:
        print("compiled extension not built; only the NumPy backend is available")
        cy = None
    print(f"{'workload':26s} {'steps':>7s} {'python (s)':>11s} {'cython (s)':>11s} {'speedup':>8s}")
    for label, n_v, n_h, adiabatic, method, steps in WORKLOADS:
        args = _args(n_v, n_h, adiabatic)
        dt = 1e-3 if not adiabatic else 1e-2
        t_py, v_py = bench(py, args, n_v, n_h, method, steps, dt, opts.repeats)
        if cy is None:
            print(f"{label:26s} {steps:7d} {t_py:11.4f}")
            continue
        t_cy, v_cy = bench(cy, args, n_v, n_h, method, steps, dt, opts.repeats)
        np.testing.assert_allclose(v_cy, v_py, rtol=1e-9, atol=1e-12)
        print(f"{label:26s} {steps:7d} {t_py:11.4f} {t_cy:11.4f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
