"""Time the numba kernels against their numpy fallbacks on pipeline-sized inputs.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called once to trigger compilation, checked for agreement
between the two flavours, then timed as the best of ``--repeat`` calls.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from panoroom import kernels
from panoroom.layout import LayoutModel
from panoroom.sphere import EquirectGrid, ManhattanFrame, grid_bearings


def _inputs(rng):
    pts = rng.normal(size=(4000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    normals = rng.normal(size=(256, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    support = (normals, pts, rng.random(4000), np.sin(0.03))

    us = rng.uniform(0, 128, 20000)
    vs = rng.uniform(0, 64, 20000)
    stamp = (us, vs, 1.0, 64, 128)

    poly = np.array([[-2, -1.5], [2.5, -1.5], [2.5, 0.5], [1, 0.5], [1, 2], [-2, 2]], dtype=np.float64)
    room = LayoutModel(poly, -1.0, 1.0, ManhattanFrame.identity())
    rays = np.ascontiguousarray(grid_bearings(EquirectGrid(256, 128)))
    cast = (rays, room.floor_polygon, room.floor_z, room.ceiling_z)

    n, s = 256, 800
    evidence = rng.random((n, s))
    partner = rng.integers(-1, s, size=(n, s))
    junction = rng.random((n, s))
    dp = (evidence, partner, junction, 3, 12)
    return {"circle_support": support, "stamp_disks": stamp, "cast_room_rays": cast, "polar_dp": dp}


def _best_time(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    inputs = _inputs(np.random.default_rng(args.seed))
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  agree")
    for name, call_args in inputs.items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        agree = _same(fast(*call_args), slow(*call_args))  # also compiles
        t_slow = _best_time(slow, call_args, args.repeat)
        t_fast = _best_time(fast, call_args, args.repeat)
        print(f"{name:<16}{1e3 * t_slow:>12.2f}{1e3 * t_fast:>12.2f}{t_slow / t_fast:>10.1f}  {agree}")


if __name__ == "__main__":
    main()
