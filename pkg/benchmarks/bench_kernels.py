"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time for each backend and
the speed-up.  Results are also checked for bit-identical output.
"""

import argparse
import sys
import timeit

import numpy as np

from instap import _kernels_py

try:
    from instap import _kernels as _ext
except ImportError:
    sys.exit("compiled extension not built; run `python setup.py build_ext --inplace` first")


def cases():
    rng = np.random.default_rng(0)
    K, T, H, W = 4, 8, 64, 64
    shapes = rng.integers(0, 3, K)
    sizes = rng.integers(8, 17, K)
    xs = rng.integers(0, W - 16, (K, T))
    ys = rng.integers(0, H - 16, (K, T))
    colors = rng.integers(0, 256, (K, 3)).astype(np.uint8)

    def raster(mod):
        frames = np.zeros((T, H, W, 3), np.uint8)
        mod.rasterize(frames, shapes, sizes, xs, ys, colors)
        return frames

    img = rng.random((23, 17, 3))
    sim = rng.standard_normal((1000, 1000))
    gt = np.arange(1000)
    return {
        "rasterize 4 objects x 8 frames": raster,
        "object_mask circle 16": lambda mod: np.asarray(mod.object_mask(0, 16)),
        "bilinear_resize 23x17 -> 32x32": lambda mod: np.asarray(mod.bilinear_resize(img, 32, 32)),
        "gt_ranks 1000 x 1000": lambda mod: np.asarray(mod.gt_ranks(sim, gt)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':34s} {'cython':>12s} {'numpy':>12s} {'speed-up':>9s}")
    for name, fn in cases().items():
        if not np.array_equal(fn(_ext), fn(_kernels_py)):
            raise SystemExit(f"{name}: backends disagree")
        n = max(1, int(0.2 / max(timeit.timeit(lambda: fn(_kernels_py), number=1), 1e-6)))
        t_ext = min(timeit.repeat(lambda: fn(_ext), number=n, repeat=args.repeat)) / n
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=n, repeat=args.repeat)) / n
        print(f"{name:34s} {t_ext * 1e6:10.1f}us {t_py * 1e6:10.1f}us {t_py / t_ext:8.1f}x")


if __name__ == "__main__":
    main()
