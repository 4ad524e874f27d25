"""Time the numba and pure-numpy selective-scan kernels on the same inputs.

    python benchmarks/bench_kernels.py --batch 8 --length 128 --d-expand 128 --d-state 16

Each row reports the best of ``--repeats`` runs per backend and the largest
relative difference between the two outputs.
"""
import argparse
import time

import numpy as np

from rommamba import kernels


def best_time(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_rel(a, b):
    if isinstance(a, tuple):
        return max(max_rel(x, y) for x, y in zip(a, b))
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def make_inputs(B, L, De, Ds, dtype, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((B, L, De)).astype(dtype)
    delta = rng.uniform(1e-3, 0.2, (B, L, De)).astype(dtype)
    A = -np.tile(np.arange(1, Ds + 1, dtype=dtype), (De, 1))
    Bm = rng.standard_normal((B, L, Ds)).astype(dtype)
    C = rng.standard_normal((B, L, Ds)).astype(dtype)
    D = np.ones(De, dtype=dtype)
    gy = rng.standard_normal((B, L, De)).astype(dtype)
    return u, delta, A, Bm, C, D, gy


def run(B, L, De, Ds, dtype, repeats):
    u, delta, A, Bm, C, D, gy = make_inputs(B, L, De, Ds, dtype)
    a, phi = kernels.zoh_coefficients(delta, A)
    bb = phi * Bm[:, :, None, :]
    # compile outside the timed region
    _, hs = kernels.scan_fwd_numba(u, a, bb, C, D)
    kernels.scan_bwd_numba(gy, u, a, bb, C, D, hs)
    kernels.zoh_core_fwd_numba(u, a, phi, Bm, C, D)
    kernels.zoh_core_bwd_numba(gy, u, delta, A, a, phi, Bm, C, D, hs)

    cases = [
        ("scan fwd", lambda: kernels.scan_fwd_numba(u, a, bb, C, D),
         lambda: kernels.scan_fwd_numpy(u, a, bb, C, D)),
        ("scan bwd", lambda: kernels.scan_bwd_numba(gy, u, a, bb, C, D, hs),
         lambda: kernels.scan_bwd_numpy(gy, u, a, bb, C, D, hs)),
        ("zoh fwd", lambda: kernels.zoh_core_fwd_numba(u, a, phi, Bm, C, D),
         lambda: kernels.zoh_core_fwd_numpy(u, a, phi, Bm, C, D)),
        ("zoh bwd", lambda: kernels.zoh_core_bwd_numba(gy, u, delta, A, a, phi, Bm, C, D, hs),
         lambda: kernels.zoh_core_bwd_numpy(gy, u, delta, A, a, phi, Bm, C, D, hs)),
    ]
    print(f"B={B} L={L} De={De} Ds={Ds} dtype={np.dtype(dtype).name}")
    print(f"{'kernel':<10} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max rel diff':>13}")
    for name, fast, slow in cases:
        tf, of = best_time(fast, repeats)
        ts, os_ = best_time(slow, repeats)
        print(f"{name:<10} {tf * 1e3:>10.2f} {ts * 1e3:>10.2f} {ts / tf:>7.1f}x {max_rel(of, os_):>13.2e}")
    t, _ = best_time(lambda: kernels.zoh_coefficients(delta, A), repeats)
    print(f"{'zoh coeff':<10} {'(numpy exp/expm1 shared by both paths)':>34} {t * 1e3:.2f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--d-expand", type=int, default=128)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    run(args.batch, args.length, args.d_expand, args.d_state, np.dtype(args.dtype).type, args.repeats)


if __name__ == "__main__":
    main()
