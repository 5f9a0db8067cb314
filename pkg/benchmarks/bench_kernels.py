"""Timing comparison: compiled kernels vs the numpy fallback.

Run as `python3 benchmarks/bench_kernels.py`.  Prints per-operation
mean times over repeated calls and the speedup of the extension.
"""

import time

import numpy as np

from mrfact._kern import fallback

try:
    from mrfact._kern import _fast
except ImportError:
    _fast = None

ANGLES = np.linspace(0.0, np.pi, 33)


def random_sym(rng, n):
    m = rng.standard_normal((n, n))
    return (m + m.T) / 2.0


def timed(fn, repeats):
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_conjugate(impl, rng, n, k, repeats):
    a = random_sym(rng, n)
    idx = np.sort(rng.choice(n, size=k, replace=False)).astype(np.intp)
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    core = np.ascontiguousarray(q * np.sign(np.diagonal(r)))
    work = a.copy()

    def call():
        work[...] = a
        impl.conjugate_inplace(work, idx, core)

    return timed(call, repeats)


def bench_jacobi(impl, rng, n, repeats):
    a = random_sym(rng, n)
    return timed(lambda: impl.jacobi_eigh(a, 1e-12, 100), repeats)


def bench_pair_scan(impl, rng, m, repeats):
    block = random_sym(rng, m)
    gram = block @ block.T
    return timed(lambda: impl.pair_scan_k2(block, gram, ANGLES, 40), repeats)


def main():
    rng = np.random.default_rng(0)
    cases = [
        ("conjugate n=128 k=8", lambda impl: bench_conjugate(impl, rng, 128, 8, 300)),
        ("conjugate n=512 k=8", lambda impl: bench_conjugate(impl, rng, 512, 8, 100)),
        ("jacobi    n=16", lambda impl: bench_jacobi(impl, rng, 16, 100)),
        ("jacobi    n=48", lambda impl: bench_jacobi(impl, rng, 48, 10)),
        ("pair scan m=32", lambda impl: bench_pair_scan(impl, rng, 32, 50)),
        ("pair scan m=96", lambda impl: bench_pair_scan(impl, rng, 96, 10)),
    ]
    header = f"{'case':22s} {'numpy':>12s} {'cython':>12s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, runner in cases:
        base = runner(fallback)
        if _fast is None:
            print(f"{name:22s} {base * 1e6:10.1f}us {'n/a':>12s} {'n/a':>8s}")
            continue
        fast = runner(_fast)
        print(
            f"{name:22s} {base * 1e6:10.1f}us {fast * 1e6:10.1f}us "
            f"{base / fast:7.2f}x"
        )
    if _fast is None:
        print("\nextension not built; fallback timings only")


if __name__ == "__main__":
    main()
