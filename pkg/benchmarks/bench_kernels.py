"""Time the numba and numpy window kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--n 2000] [--length 14] [--repeat 20]

Both backends are imported directly, so the STLCONF_NUMBA flag does not
matter here. Outputs of the two paths are compared before timing.
"""

import argparse
import time

import numpy as np

from stlconf import _kernels as K


def _inputs(n, length, seed=0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(max(1, length // 2), length + 1, n).astype(np.int64)
    X = rng.normal(size=(n, length))
    X[np.arange(length)[None, :] >= lengths[:, None]] = 0.0
    starts = np.floor(rng.uniform(0, 0.5, n) * (lengths - 1) + 1e-6).astype(np.int64)
    ends = np.maximum(starts, np.floor(rng.uniform(0.5, 1.0, n) * (lengths - 1) + 1e-6).astype(np.int64))
    return X, lengths, starts, ends


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--length", type=int, default=14)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--tau", type=float, default=20.0)
    args = ap.parse_args()
    if K.numba is None:
        raise SystemExit("numba is not installed; only the numpy path is available")

    X, lengths, starts, ends = _inputs(args.n, args.length)
    out = K.window_soft_np(X, lengths, starts, ends, args.tau, False)
    adj = np.ones_like(X)
    cases = {
        "window_hard": (
            lambda: K.window_hard_np(X, lengths, starts, ends, False),
            lambda: K.window_hard_nb(X, lengths, starts, ends, False),
        ),
        "window_soft": (
            lambda: K.window_soft_np(X, lengths, starts, ends, args.tau, False),
            lambda: K.window_soft_nb(X, lengths, starts, ends, args.tau, False),
        ),
        "window_soft_grad": (
            lambda: K.window_soft_grad_np(X, out, adj, lengths, starts, ends, args.tau, False),
            lambda: K.window_soft_grad_nb(X, out, adj, lengths, starts, ends, args.tau, False),
        ),
    }
    print(f"N={args.n} L={args.length} best of {args.repeat}")
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, (f_np, f_nb) in cases.items():
        a, b = f_np(), f_nb()  # also triggers compilation
        t_np, t_nb = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        diff = float(np.max(np.abs(a - b)))
        print(f"{name:<18}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>9.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
