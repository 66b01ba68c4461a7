"""Time the compiled kernels against the numpy fallback on identical inputs.

Usage::

    python bench/bench_backends.py [--repeats 3] [--csv out.csv]

Both backends are imported side by side, so one process measures both; the
compiled rows are skipped when the extension is not built.
"""
import argparse
import csv
import sys
import time

import numpy as np

from imga import kernels
from imga.classify import build_background_index, csr_gather, _corner_lattice
from imga.geometry import BARY_TOL, Aabb, icosphere
from imga.octree import RefinementSpec, build
from imga.fem.basis import precompute_basis


def _best(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(seed=0):
    rng = np.random.default_rng(seed)
    sph = icosphere(4, 0.5)
    a, _, _ = sph.corners
    e1, e2 = sph._edges
    tol_t = 1e-12 * sph.bbox.diagonal

    pts = rng.uniform(-0.7, 0.7, size=(400, 3))
    dirs = np.tile([1.0, 0.0, 0.0], (pts.shape[0], 1))
    yield "ray_cast", lambda k: k.ray_cast(pts, dirs, a, e1, e2, BARY_TOL, tol_t)

    lo, step, nb, cptr, ctris = sph.ray_grid()
    many = rng.uniform(-0.7, 0.7, size=(20000, 3))
    mdirs = np.tile([1.0, 0.0, 0.0], (many.shape[0], 1))
    ij = np.floor((many[:, 1:] - lo) / step).astype(np.int64)
    ok = np.all((ij >= 0) & (ij < nb), axis=1)
    cell = np.where(ok, ij[:, 0] * nb + ij[:, 1], -1)
    yield "ray_cast_binned", lambda k: k.ray_cast_binned(many, mdirs, cell, cptr, ctris, a, e1, e2,
                                                         BARY_TOL, tol_t)

    box = Aabb(np.full(3, -0.65), np.full(3, 0.65))
    tree = build(RefinementSpec(box, 3, surface=sph, surface_level=6))
    index = build_background_index(tree, sph)
    busy = np.flatnonzero(np.diff(index.win_ptr) > 0)
    lat = np.unique(_corner_lattice(tree)[busy].reshape(-1, 3), axis=0)
    leaves = tree.locate_cells(np.minimum(lat, (1 << tree.max_level) - 1))
    q = tree.box.lo + lat * tree.cell
    ptr, tris = csr_gather(index.win_ptr, index.win_tris, leaves)
    yield "normal_votes", lambda k: k.normal_votes(q, ptr, tris, sph.centroids, sph.normals)

    t = rng.integers(0, sph.n_triangles, 200000)
    c = rng.uniform(-0.6, 0.6, size=(t.size, 3))
    h = np.full((t.size, 3), 0.05)
    pa, pb, pc = (v[t] for v in sph.corners)
    yield "tri_box_overlap", lambda k: k.tri_box_overlap(pa, pb, pc, c, h)

    for bf in (1, 2):
        B = precompute_basis(bf)
        phi = np.ascontiguousarray(B.phi)
        gpw = rng.normal(size=(4096, B.nq))
        yield f"gauss_loop_batch_bf{bf}", lambda k, phi=phi, gpw=gpw: k.gauss_loop_batch(phi, phi, gpw)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--csv", help="write the table to this file as well")
    args = ap.parse_args(argv)
    backends = [("numpy", kernels.fallback)]
    if kernels.compiled is not None:
        backends.insert(0, ("cython", kernels.compiled))
    else:
        print("compiled kernels unavailable; timing the fallback only", file=sys.stderr)
    rows = []
    for name, fn in cases():
        times = {b: _best(lambda: fn(mod), args.repeats) for b, mod in backends}
        ref = fn(kernels.fallback)
        same = True
        if kernels.compiled is not None:
            got = fn(kernels.compiled)
            ref_t = ref if isinstance(ref, tuple) else (ref,)
            got_t = got if isinstance(got, tuple) else (got,)
            same = all(np.allclose(np.asarray(x, float), np.asarray(y, float), rtol=1e-12, atol=1e-12)
                       for x, y in zip(ref_t, got_t))
        speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        rows.append([name, times.get("cython", float("nan")), times["numpy"], speed, same])
        print(f"{name:24s} cython {rows[-1][1]:9.4f}s  numpy {rows[-1][2]:9.4f}s  "
              f"speedup {speed:7.2f}  agree {same}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "cython_time", "numpy_time", "speedup", "agree"])
            w.writerows(rows)
    return 0 if all(r[-1] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
