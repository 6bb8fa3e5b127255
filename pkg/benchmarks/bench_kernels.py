"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once untimed first (numba compiles on first call), then
the best of ``--repeat`` runs is reported.  Outputs of both backends are
compared before timing.
"""
import argparse
import time

import numpy as np

from mgmicro import _accel
from mgmicro import kernels as K
from mgmicro import synth as SY


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    img, gt = SY.generate(SY.SynthSpec(seed=0))
    thick = K.chessboard_distance_numpy(~gt.boundary) <= 1
    labels, n = K.label8_numpy(gt.boundary)
    xp = rng.standard_normal((4, 16, 66, 66))
    cols = K.im2col_numpy(xp, 3, 3, 1, 1, 64, 64)
    size = 200_000
    adam = [rng.standard_normal(size) for _ in range(3)] + [np.abs(rng.standard_normal(size))]

    def run_adam(f):
        p, m, g, v = (a.copy() for a in adam)
        f(p, m, v, g, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8)
        return p

    return [
        ("im2col 4x16x64x64 k3", lambda f: f(xp, 3, 3, 1, 1, 64, 64), K.im2col_numpy, K.im2col_numba),
        ("col2im 4x16x64x64 k3", lambda f: f(cols, 4, 16, 66, 66, 3, 3, 1, 1), K.col2im_numpy, K.col2im_numba),
        ("zhang_suen 256x256", lambda f: f(thick), K.zhang_suen_numpy, K.zhang_suen_numba),
        ("label8 256x256", lambda f: f(gt.boundary), K.label8_numpy, K.label8_numba),
        ("chessboard 256x256", lambda f: f(~gt.boundary), K.chessboard_distance_numpy, K.chessboard_distance_numba),
        ("grow_regions 256x256", lambda f: f(labels, n, img.values, 0.15), K.grow_regions_numpy,
         K.grow_regions_numba),
        ("adam_update 200k", run_adam, K.adam_update_numpy, K.adam_update_numba),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call, f_np, f_nb in cases():
        if not same(call(f_np), call(f_nb)):
            raise SystemExit(f"{name}: backends disagree")
        t_np = best_of(lambda: call(f_np), args.repeat)
        t_nb = best_of(lambda: call(f_nb), args.repeat)
        print(f"{name:24s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
