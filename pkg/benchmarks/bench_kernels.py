"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default training setup (batch 32, block 16, 7 class
probabilities into a 32-unit LSTM; STAT over 7 + 32 columns) plus a
single-sequence case as used at inference.
"""

import argparse
import timeit

import numpy as np

from affex import kernels


def _lstm_case(rng, B, T, D, H):
    X = rng.standard_normal((B, T, D))
    Wx = rng.standard_normal((D, 4 * H)) * 0.2
    Wh = rng.standard_normal((H, 4 * H)) * 0.2
    b = rng.standard_normal(4 * H) * 0.1
    dH = rng.standard_normal((B, T, H))
    return X, Wx, Wh, b, dH


def bench(repeat: int):
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])
    rows = []
    for label, (B, T, D, H) in (("lstm train batch", (32, 16, 7, 32)), ("lstm single seq", (1, 16, 7, 32))):
        X, Wx, Wh, b, dH = _lstm_case(rng, B, T, D, H)
        times = {}
        for name in backends:
            k = kernels.get_backend(name)
            cache = k.lstm_seq_forward(X, Wx, Wh, b)
            fwd = min(timeit.repeat(lambda: k.lstm_seq_forward(X, Wx, Wh, b), number=20, repeat=repeat)) / 20
            bwd = min(timeit.repeat(lambda: k.lstm_seq_backward(dH, X, Wx, Wh, *cache), number=20, repeat=repeat)) / 20
            times[name] = (fwd, bwd)
        rows.append((label + " fwd", {n: t[0] for n, t in times.items()}))
        rows.append((label + " bwd", {n: t[1] for n, t in times.items()}))

    M = rng.standard_normal((32, 16, 39))
    dout = rng.standard_normal((32, 3 * 39))
    times_f, times_b = {}, {}
    for name in backends:
        k = kernels.get_backend(name)
        _, amax, amin = k.stat_pool_forward(M)
        times_f[name] = min(timeit.repeat(lambda: k.stat_pool_forward(M), number=100, repeat=repeat)) / 100
        times_b[name] = min(timeit.repeat(lambda: k.stat_pool_backward(dout, amax, amin, 16), number=100, repeat=repeat)) / 100
    rows.append(("stat pool fwd", times_f))
    rows.append(("stat pool bwd", times_b))
    return backends, rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends, rows = bench(args.repeat)
    header = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(f"active backend: {kernels.BACKEND}")
    print(header)
    for label, t in rows:
        line = f"{label:<22}" + "".join(f"{t[b] * 1e3:>14.4f}" for b in backends)
        if len(backends) == 2:
            line += f"{t['numpy'] / t['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
