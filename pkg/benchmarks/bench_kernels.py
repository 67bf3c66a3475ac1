"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from hypoflow import _kernels as K


def cases(rng):
    for n in (256, 1024, 2048):
        kv, g = rng.standard_normal(2 * n - 1), rng.standard_normal(n)
        yield f"toeplitz_conv n={n}", (K.toeplitz_conv_numpy, K.toeplitz_conv_numba), (kv, g, 0.01)
    for nx, nv in ((96, 24), (256, 32), (1024, 64)):
        c, s = rng.standard_normal((nx, nv)), 1e-3 * rng.standard_normal(nx)
        yield f"field_exp {nx}x{nv}", (K.field_exp_numpy, K.field_exp_numba), (c, s, 1.0)
    for nq, nv in ((64, 32), (512, 128)):
        v = np.linspace(-6, 6, nq)
        yield f"hermite_table q={nq} m={nv}", (K.hermite_table_numpy, K.hermite_table_numba), (v, nv)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'max diff':>11}")
    for name, (f_np, f_nb), a in cases(rng):
        ref, out = f_np(*a), f_nb(*a)  # also triggers compilation
        diff = float(np.max(np.abs(ref - out)))
        t_np = min(timeit.repeat(lambda: f_np(*a), number=3, repeat=args.repeat)) / 3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=3, repeat=args.repeat)) / 3
        print(f"{name:<28}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}{diff:>11.1e}")


if __name__ == "__main__":
    main()
