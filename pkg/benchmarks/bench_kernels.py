"""Time the numba and numpy kernel backends on the same inputs.

Usage: python benchmarks/bench_kernels.py [--pixels N] [--repeat R]
"""

import argparse
import time

import numpy as np

from invrender import _accel, kernels
from invrender.grid import direction_grid


def inputs(pixels, seed=0):
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=(pixels, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    grid = direction_grid(18, 36)
    return {
        "albedo": rng.uniform(size=(pixels, 3)),
        "normal": normal,
        "mask": np.ones(pixels, dtype=bool),
        "dirs": grid.flat_directions(),
        "radiance": rng.uniform(size=(grid.flat_directions().shape[0], 3)),
        "grad": rng.normal(size=(pixels, 3)),
        "plane": rng.uniform(size=(240, 320)),
        "rows": rng.integers(0, 240, 5000),
        "cols": rng.integers(0, 320, 5000),
    }


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pixels", type=int, default=240 * 320 // 4)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    x = inputs(args.pixels)
    cases = {
        "shade_forward": lambda: kernels.shade_forward(x["albedo"], x["normal"], x["mask"], x["dirs"], x["radiance"]),
        "shade_backward": lambda: kernels.shade_backward(
            x["albedo"], x["normal"], x["mask"], x["dirs"], x["radiance"], x["grad"]
        ),
        "patch_means": lambda: kernels.patch_means(x["plane"], x["rows"], x["cols"], 1),
    }
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'kernel':16s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in cases.items():
        row = {}
        for b in backends:
            prev = _accel.set_backend(b)
            row[b] = best_of(fn, args.repeat)
            _accel.set_backend(prev)
        speed = f"{row['numpy'] / row['numba']:10.2f}x" if "numba" in row else ""
        print(f"{name:16s}" + "".join(f"{row[b]:11.4f}s" for b in backends) + speed)


if __name__ == "__main__":
    main()
