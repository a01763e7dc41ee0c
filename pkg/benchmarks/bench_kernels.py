"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 1000] [--repeat 200]

Both backends are imported directly, so the environment switch is irrelevant here.
"""

import argparse
import timeit

import numpy as np

from placebo import _kernels_py

try:
    from placebo import _kernels
except ImportError:  # extension not built
    _kernels = None


def problem(n, p, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = np.linspace(0.5, -0.5, p)
    z = (rng.random(n) < 1 / (1 + np.exp(-(x @ beta)))).astype(float)
    y = x @ beta + rng.standard_normal(n)
    return np.ascontiguousarray(x), z, y, np.ones(n)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    x, z, y, w = problem(args.n, args.p)
    beta0 = np.zeros(args.p)
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not available; timing the fallback only")

    calls = {
        "irls_logit": lambda k: k.irls_logit(x, z, w, beta0, 100, 1e-10),
        "wls": lambda k: k.wls(x, y, w),
    }
    print(f"n={args.n} p={args.p} repeat={args.repeat}")
    print(f"{'kernel':<12}{'backend':<10}{'us/call':>12}{'speedup':>10}")
    for name, call in calls.items():
        times = {}
        for label, mod in backends.items():
            call(mod)  # warm up
            best = min(timeit.repeat(lambda: call(mod), number=args.repeat, repeat=3))
            times[label] = best / args.repeat * 1e6
        for label, us in times.items():
            print(f"{name:<12}{label:<10}{us:>12.1f}{times['python'] / us:>9.2f}x")
    if _kernels is not None:
        a = np.asarray(_kernels.irls_logit(x, z, w, beta0, 100, 1e-10)[0])
        b = np.asarray(_kernels_py.irls_logit(x, z, w, beta0, 100, 1e-10)[0])
        print(f"max coefficient difference: {np.max(np.abs(a - b)):.1e}")


if __name__ == "__main__":
    main()
