"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend before timing so numba's compilation
is excluded; the largest absolute difference between the two backends' outputs is
reported alongside (exp roundoff makes the Gaussian fill differ in the
last bits).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from toothseg._accel import HAVE_NUMBA, use_numba
from toothseg.geometry import delaunay
from toothseg.kernels import gaussian_fill, locate_points, rasterize_tets, tet_barycentric_operators


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    heat = np.zeros((64, 64, 32))

    def fill():
        heat[:] = 0
        for c in rng_centres:
            gaussian_fill(heat, c, np.round(c), 2.0, 8.0)
        return heat.copy()

    rng_centres = rng.uniform(8, 24, (16, 3)) * (2, 2, 1)

    cloud = rng.uniform(0, 20, (40, 3))
    tri = delaunay(cloud)
    inv, anchor = tet_barycentric_operators(tri.vertices, tri.tetrahedra)
    queries = rng.uniform(-2, 22, (20_000, 3))

    def locate():
        return locate_points(queries, inv, anchor, 1e-9)

    def raster():
        return rasterize_tets((24, 24, 24), tri.vertices, tri.tetrahedra, 1e-9)

    return {"gaussian_fill (16 peaks, 64x64x32)": fill,
            f"locate_points (20k points, {len(tri.tetrahedra)} tets)": locate,
            "rasterize_tets (24^3 grid)": raster}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy path is available")
    print(f"{'kernel':<42} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max|diff|")
    for name, fn in cases(np.random.default_rng(0)).items():
        prev = use_numba(False)
        t_np = _best(fn, args.repeat)
        ref = fn()
        use_numba(True)
        t_nb = _best(fn, args.repeat) if HAVE_NUMBA else float("nan")
        diff = float(np.max(np.abs(ref.astype(float) - fn().astype(float)))) if HAVE_NUMBA else 0.0
        use_numba(prev)
        print(f"{name:<42} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
