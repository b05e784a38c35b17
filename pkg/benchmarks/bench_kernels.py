"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Inputs come from real meshes (circle of radius 2 clipped on a square
background mesh, and the assembled CutFEM system), so the timings reflect
what the adaptive loop does.
"""
import argparse
import time

import numpy as np

from cutfem_amr import _kernels
from cutfem_amr.assembly import BoundaryData, FeSpace, assemble
from cutfem_amr.geometry import Circle, interpolate_levelset
from cutfem_amr.mesh import build_background_mesh, extract_active


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can run")
        return 1

    print(f"{'kernel':<16}{'n':>10}{'numpy [s]':>14}{'numba [s]':>14}{'speedup':>10}")
    phi = Circle((0.0, 0.0), 2.0)
    for n in args.sizes:
        mesh = build_background_mesh((-3, 3, -3, 3), n)
        vals = interpolate_levelset(phi, mesh).values
        xy, v, gid = mesh.coords, vals[mesh.triangles], mesh.triangles
        t_np = best_of(lambda: _kernels.clip_triangles(xy, v, gid, use_numba=False), args.repeat)
        t_nb = best_of(lambda: _kernels.clip_triangles(xy, v, gid, use_numba=True), args.repeat)
        print(f"{'clip_triangles':<16}{mesh.ntriangles:>10}{t_np:>14.5f}{t_nb:>14.5f}{t_np / t_nb:>10.1f}")

    for n in args.sizes:
        mesh = build_background_mesh((-3, 3, -3, 3), n)
        cut = extract_active(mesh, interpolate_levelset(phi, mesh))
        system = assemble(FeSpace.from_cut(cut), cut, 1.0, BoundaryData(lambda x, y: x * y))
        A, b = system.A, system.b
        maxit = 10 * len(b)
        t_np = best_of(lambda: _kernels.pcg(A, b, 1e-10, maxit, use_numba=False), args.repeat)
        t_nb = best_of(lambda: _kernels.pcg(A, b, 1e-10, maxit, use_numba=True), args.repeat)
        print(f"{'pcg':<16}{len(b):>10}{t_np:>14.5f}{t_nb:>14.5f}{t_np / t_nb:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
