"""Compare the compiled and numpy kernels on the expert's hot loop.

    python3 benchmarks/bench_kernels.py [--sizes 4,16,100] [--repeat 5]

Times one projected-ascent call (50 steps) and one rate evaluation per size,
best of ``--repeat``, and checks that both backends agree.
"""

import argparse
import timeit

import numpy as np

from gdmpolicy.kernels import _fallback

try:
    from gdmpolicy.kernels import _ckernels
except ImportError:
    _ckernels = None


def problem(n, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.lognormal(0.0, 2.0, (n, n)) * 10.0
    g[np.diag_indices(n)] *= 50.0
    return rng.uniform(0, 1, n), g, rng.uniform(0.05, 1.0, n)


def bench(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="4,16,100")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'N':>5} {'kernel':>8} {'numpy (us)':>12} {'cython (us)':>12} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        u, g, w = problem(n)
        cases = {
            "ascent": lambda m: m.ascent(u, g, w, 0.05, 50)[0],
            "rates": lambda m: m.rates(u, g),
        }
        for name, call in cases.items():
            number = max(1, 2000 // n) if name == "rates" else max(1, 200 // n)
            t_py = bench(lambda: call(_fallback), args.repeat, number)
            if _ckernels is None:
                print(f"{n:>5} {name:>8} {t_py * 1e6:>12.1f} {'-':>12} {'-':>8}")
                continue
            t_cy = bench(lambda: call(_ckernels), args.repeat, number)
            a, b = np.asarray(call(_fallback)), np.asarray(call(_ckernels))
            if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
                raise SystemExit(f"backends disagree for {name} at N={n}")
            print(f"{n:>5} {name:>8} {t_py * 1e6:>12.1f} {t_cy * 1e6:>12.1f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
