"""Time the numba and numpy variants of the decision kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the antibiotic study at its largest sample size. Both
variants are checked for agreement before timing.
"""
import argparse
import sys
import timeit

import numpy as np

from scalesim import _accel, kernels

SHAPES = [(128, 21, 100), (128, 21, 800), (128, 21, 1600), (1000, 200, 60)]


def bench(fn, args, repeat):
    fn(*args)  # warm-up, includes JIT compilation
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'S x D x N':>18}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for S, D, N in SHAPES:
        x = rng.normal(size=(S, D, N))
        g = (np.arange(N) >= N // 2).astype(np.int64)
        ref = kernels.group_moments_numpy(x, g)
        fast = kernels.group_moments_numba(x, g)
        assert all(np.allclose(a, b, rtol=1e-12, atol=1e-12) for a, b in zip(ref, fast))
        t_np = bench(kernels.group_moments_numpy, (x, g), args.repeat)
        t_nb = bench(kernels.group_moments_numba, (x, g), args.repeat)
        print(f"{'group_moments':<16}{f'{S}x{D}x{N}':>18}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}")

        p = rng.uniform(size=(S, D))
        assert np.array_equal(kernels.bh_adjust_rows_numpy(p), kernels.bh_adjust_rows_numba(p))
        t_np = bench(kernels.bh_adjust_rows_numpy, (p,), args.repeat)
        t_nb = bench(kernels.bh_adjust_rows_numba, (p,), args.repeat)
        print(f"{'bh_adjust_rows':<16}{f'{S}x{D}':>18}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
