"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--grid 32] [--bricks 32] [--repeat 20]

The first numba call of each kernel (JIT compile or cache load) is excluded.
The end-to-end rows run a full probabilistic render plus backward pass in a
subprocess per backend, selected with BRICKFORGE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from brickforge import _kernels
from brickforge.bricks import Geometry

E2E = """
import time, numpy as np
from brickforge import _kernels
from brickforge.autodiff import Tensor, backward
from brickforge.bricks import Geometry
from brickforge.datagen import generate_rad_object, render_silhouettes
from brickforge.pipeline import render_probabilistic, silhouette_loss
geom = Geometry({grid})
rng = np.random.default_rng(0)
tree = generate_rad_object({bricks}, geom, rng)
target = render_silhouettes(tree.voxels())
def once():
    p = Tensor(rng.random((len(tree), 32)).astype(np.float32), requires_grad=True)
    backward(silhouette_loss(render_probabilistic(tree.bricks, p, geom), target))
once()
t = time.perf_counter()
for _ in range({repeat}):
    once()
print(_kernels.backend, (time.perf_counter() - t) / {repeat})
"""


def kernel_cases(geom, n, rng):
    S = geom.size
    poses = np.stack([rng.integers(4, S - 8, n), rng.integers(4, S - 8, n),
                      rng.integers(1, S - 1, n), rng.integers(0, 2, n)], axis=1).astype(np.int64)
    occ = (rng.random(S ** 3) < 0.05).astype(np.uint8)
    want = rng.random(32) < 0.3
    cells = _kernels.numpy_impl.child_cells(poses, S, geom.slot_offsets, geom.cell_offsets)
    weights = rng.random((n, 32)).astype(np.float32)
    stack = (rng.random((n + 1, S ** 3)) * (rng.random((n + 1, S ** 3)) < 0.1)).astype(np.float32)
    grad = rng.random((n, S ** 3)).astype(np.float32)
    _, count = _kernels.numpy_impl.nonzero_mean_axis0(stack)
    g1 = rng.random(S ** 3).astype(np.float32)
    return {
        "expand_brick": lambda k: k.expand_brick(occ.copy(), S, *poses[0], geom.slot_offsets,
                                                 geom.cell_offsets, want, 8),
        "child_cells": lambda k: k.child_cells(poses, S, geom.slot_offsets, geom.cell_offsets),
        "scatter_footprints": lambda k: k.scatter_footprints(weights, cells, S ** 3),
        "gather_footprints": lambda k: k.gather_footprints(grad, cells),
        "nonzero_mean_axis0": lambda k: k.nonzero_mean_axis0(stack),
        "nonzero_mean_axis0_grad": lambda k: k.nonzero_mean_axis0_grad(stack, count, g1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=32)
    ap.add_argument("--bricks", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-e2e", action="store_true")
    args = ap.parse_args()

    impls = [_kernels.numpy_impl] + ([_kernels.numba_impl] if _kernels.numba_impl else [])
    cases = kernel_cases(Geometry(args.grid), args.bricks, np.random.default_rng(0))
    print(f"grid {args.grid}, {args.bricks} bricks, best of 3 x {args.repeat} calls")
    print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        times = []
        for k in impls:
            fn(k)  # warm up / compile
            times.append(min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat)
        nb = times[1] if len(times) > 1 else float("nan")
        print(f"{name:26s} {times[0] * 1e3:10.3f} {nb * 1e3:10.3f} {times[0] / nb:8.1f}")

    if args.no_e2e:
        return
    code = E2E.format(grid=args.grid, bricks=args.bricks, repeat=args.repeat)
    for flag in ("0", "1"):
        env = dict(os.environ, BRICKFORGE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"render+backward [{out[0]:5s}]  {float(out[1]) * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
