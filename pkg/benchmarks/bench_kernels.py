"""Benchmark the compiled kernels against the NumPy fallback.

Run:  python benchmarks/bench_kernels.py
"""

import math
import timeit

import numpy as np

from zimix._kernels import reference

try:
    from zimix._kernels import _speedups
except ImportError:
    _speedups = None


def make_inputs(n, k, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(0, 2, n), rng.normal(0, 0.5, n), rng.normal(0.0, 1.5, (n, k)))


def bench(label, fn, number=30):
    dt = timeit.timeit(fn, number=number) / number
    print(f"  {label:18s} {dt * 1e3:8.2f} ms")
    return dt


def main():
    print("false-zero integral (log-normal family), 300 records x 2 components")
    resid0, slope, mu = make_inputs(300, 2)
    log_bound = math.log(20.0)
    scenarios = [
        ("typical", dict(sigma=0.6, rate=1.4)),
        ("sharp masking", dict(sigma=1.5, rate=6.0)),
    ]
    for name, p in scenarios:
        print(f"scenario: {name} (sigma={p['sigma']}, rate={p['rate']})")
        args = (resid0, slope, mu, p["sigma"], 1.0, p["rate"], log_bound, 1e-10)
        t_ref = bench("numpy fallback", lambda: reference.log_h_lognormal(*args))
        if _speedups is not None:
            t_c = bench("cython", lambda: _speedups.log_h_lognormal(*args))
            print(f"  speedup {t_ref / t_c:6.1f}x")

    print("masked count sums, 300 records x 2 components, bound 20")
    loc = mu + 1.5
    args_p = (resid0, slope, loc, 1.2, 0.6, 20.0)
    t_ref = bench("numpy poisson", lambda: reference.log_false_zero_sum_poisson(*args_p))
    if _speedups is not None:
        t_c = bench("cython poisson", lambda: _speedups.log_false_zero_sum_poisson(*args_p))
        print(f"  speedup {t_ref / t_c:6.1f}x")
    args_nb = (resid0, slope, loc, 3.0, 1.2, 0.6, 20.0)
    t_ref = bench("numpy negbin", lambda: reference.log_false_zero_sum_negbin(*args_nb))
    if _speedups is not None:
        t_c = bench("cython negbin", lambda: _speedups.log_false_zero_sum_negbin(*args_nb))
        print(f"  speedup {t_ref / t_c:6.1f}x")

    if _speedups is None:
        print("compiled extension not available; only the fallback was timed")


if __name__ == "__main__":
    main()
