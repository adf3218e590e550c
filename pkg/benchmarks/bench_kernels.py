"""Time the numba kernels against their numpy fallbacks on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median time of each backend, the
speed-up, and whether the two outputs agree exactly.
"""

import argparse
import statistics
import time

import numpy as np

from octselfnet import _kernels as K


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(rng):
    n, c, k, s, ho = 32, 16, 3, 1, 16
    dcols = rng.normal(size=(n, ho, ho, c, k, k))
    hp = (ho - 1) * s + k

    def col2im(impl):
        out = np.zeros((n, c, hp, hp))
        impl(dcols, out, s)
        return out

    xp = np.pad(rng.normal(size=(32, 8, 16, 16)), ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    g = rng.normal(size=(32, 8, 8, 8))
    _, arg = K.maxpool_fwd_numpy(xp, 3, 2, 8, 8)

    def bwd(impl):
        gx = np.zeros_like(xp)
        impl(g, arg, gx)
        return gx

    img = rng.random((64, 64))
    yy, xx = np.meshgrid(np.linspace(-2, 65, 128), np.linspace(-2, 65, 128), indexing="ij")
    return {
        "col2im": (lambda: col2im(K.col2im_numba), lambda: col2im(K.col2im_numpy)),
        "maxpool_fwd": (lambda: K.maxpool_fwd_numba(xp, 3, 2, 8, 8)[0], lambda: K.maxpool_fwd_numpy(xp, 3, 2, 8, 8)[0]),
        "maxpool_bwd": (lambda: bwd(K.maxpool_bwd_numba), lambda: bwd(K.maxpool_bwd_numpy)),
        "bilinear": (lambda: K.bilinear_numba(img, yy, xx, True), lambda: K.bilinear_numpy(img, yy, xx, True)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if K.numba is None:
        print("numba is not installed; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12} {'numba ms':>9} {'numpy ms':>9} {'speed-up':>8}  identical")
    for name, (fast, slow) in cases(rng).items():
        a, b = fast(), slow()  # the first call also triggers compilation
        tf = _median_time(fast, args.repeat)
        ts = _median_time(slow, args.repeat)
        print(f"{name:<12} {tf * 1e3:9.3f} {ts * 1e3:9.3f} {ts / tf:8.2f}x  {np.array_equal(a, b)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
