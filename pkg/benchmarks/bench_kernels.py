"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats N] [--csv out.csv]

Each kernel is run once per backend before timing so numba compilation is
excluded. Also times one forward+backward pass of the tiny model.
"""
import argparse
import csv
import time

import numpy as np

from maxvit_unet import kernels
from maxvit_unet.config import TINY
from maxvit_unet.model import build
from maxvit_unet.objectives import composite_loss
from maxvit_unet.tensor import Tensor, backward


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(rng):
    x = rng.normal(size=(8, 64, 64, 64)).astype(np.float32)
    w = rng.normal(size=(64, 3, 3)).astype(np.float32)
    small = rng.normal(size=(8, 16, 64, 64)).astype(np.float32)
    cols = kernels.im2col(small, 3, 1, 1)
    out, arg = kernels.maxpool_forward(x, 2, 2)
    gout = rng.normal(size=out.shape).astype(np.float32)
    gdw = rng.normal(size=x.shape).astype(np.float32)
    return {
        "im2col 8x16x64x64 k3": lambda: kernels.im2col(small, 3, 1, 1),
        "col2im 8x16x64x64 k3": lambda: kernels.col2im(cols, small.shape, 3, 1, 1),
        "depthwise fwd 8x64x64x64": lambda: kernels.depthwise_forward(x, w, 1, 1),
        "depthwise bwd 8x64x64x64": lambda: kernels.depthwise_backward(x, w, gdw, 1, 1),
        "maxpool fwd 8x64x64x64": lambda: kernels.maxpool_forward(x, 2, 2),
        "maxpool bwd 8x64x64x64": lambda: kernels.maxpool_backward(gout, arg, x.shape, 2, 2),
    }


def model_step(rng):
    model = build(TINY, seed=0)
    x = Tensor(rng.normal(size=(4, 3, 64, 64)).astype(np.float32))
    y = rng.integers(0, 2, size=(4, 64, 64))

    def step():
        model.zero_grad()
        backward(composite_loss(model(x), y))

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--csv")
    args = parser.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not importable; only the numpy backend can be timed")
    rng = np.random.default_rng(0)
    jobs = workloads(rng)
    jobs["tiny model fwd+bwd (B=4)"] = model_step(rng)
    rows = []
    for name, fn in jobs.items():
        timings = {}
        for backend in ("numpy", "numba") if kernels.HAVE_NUMBA else ("numpy",):
            prev = kernels.set_backend(backend)
            timings[backend] = best_of(fn, args.repeats)
            kernels.set_backend(prev)
        speedup = timings["numpy"] / timings["numba"] if "numba" in timings else float("nan")
        rows.append({"kernel": name, **{f"{k}_ms": 1e3 * v for k, v in timings.items()}, "speedup": speedup})
        print(f"{name:<28} numpy {1e3 * timings['numpy']:9.2f} ms   "
              f"numba {1e3 * timings.get('numba', float('nan')):9.2f} ms   x{speedup:.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


if __name__ == "__main__":
    main()
