"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_backends.py [--T 300] [--D 3] [--L 8,16,32] [--repeat 3]
"""
import argparse
import time

import numpy as np

from pnlss import _backend, _kernels


def _best(fn, repeat):
    fn()  # warm-up (JIT compile on the numba side)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=300)
    ap.add_argument("--D", type=int, default=3)
    ap.add_argument("--L", default="8,16,32")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _backend.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    T, D = args.T, args.D
    mus = rng.standard_normal((T, D))
    Sigmas = np.broadcast_to(0.1 * np.eye(D), (T, D, D)).copy()
    print(f"{'kernel':<14} {'L':>4} {'numba s':>10} {'numpy s':>10} {'speedup':>8}")
    for L in [int(v) for v in args.L.split(",")]:
        W, wt = rng.standard_normal((L, D)), rng.standard_normal(L)
        C, s = rng.standard_normal((L, D)), rng.uniform(0.5, 2.0, L)
        alpha, beta = rng.standard_normal((T, L)), rng.standard_normal((T, L, D))
        K = rng.standard_normal((L, L))
        Knl = K @ K.T
        cases = {
            "ridge_moments": lambda nb: _kernels.ridge_moments(mus, Sigmas, W, wt, use_numba=nb),
            "ridge_qgrad": lambda nb: _kernels.ridge_qgrad(mus, Sigmas, alpha, beta, Knl, W, wt, use_numba=nb),
            "rbf_moments": lambda nb: _kernels.rbf_moments(mus, Sigmas, C, s, use_numba=nb),
            "rbf_qgrad": lambda nb: _kernels.rbf_qgrad(mus, Sigmas, alpha, beta, Knl, C, s, use_numba=nb),
        }
        for name, fn in cases.items():
            a = _best(lambda: fn(True), args.repeat)
            b = _best(lambda: fn(False), args.repeat)
            print(f"{name:<14} {L:>4} {a:>10.4f} {b:>10.4f} {b / a:>8.1f}")


if __name__ == "__main__":
    main()
