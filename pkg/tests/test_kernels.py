import os
import subprocess
import sys

import numpy as np
import pytest

from imga import kernels
from imga.fem.basis import precompute_basis
from imga.geometry import BARY_TOL, icosphere

needs_compiled = pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")
PKG = os.path.join(os.path.dirname(__file__), "..")


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_allclose(np.asarray(x, float), np.asarray(y, float), rtol=1e-12, atol=1e-13)


def both(fn):
    return fn(kernels.compiled), fn(kernels.fallback)


@pytest.fixture(scope="module")
def sphere():
    return icosphere(3, 0.5)


@needs_compiled
def test_ray_cast(sphere, rng):
    a, _, _ = sphere.corners
    e1, e2 = sphere._edges
    pts = rng.uniform(-0.7, 0.7, (300, 3))
    dirs = rng.normal(size=(300, 3))
    # a few rays through vertices and edges exercise the degenerate flags
    pts[:10] = sphere.vertices[:10] * 0.5
    dirs[:10] = sphere.vertices[:10]
    _same(*both(lambda k: k.ray_cast(pts, dirs, a, e1, e2, BARY_TOL, 1e-12)))


@needs_compiled
def test_ray_cast_binned(sphere, rng):
    a, _, _ = sphere.corners
    e1, e2 = sphere._edges
    lo, step, nb, cptr, ctris = sphere.ray_grid()
    pts = rng.uniform(-0.7, 0.7, (2000, 3))
    dirs = np.tile([1.0, 0.0, 0.0], (pts.shape[0], 1))
    ij = np.floor((pts[:, 1:] - lo) / step).astype(np.int64)
    ok = np.all((ij >= 0) & (ij < nb), axis=1)
    cell = np.where(ok, ij[:, 0] * nb + ij[:, 1], -1)
    _same(*both(lambda k: k.ray_cast_binned(pts, dirs, cell, cptr, ctris, a, e1, e2, BARY_TOL, 1e-12)))


@needs_compiled
def test_normal_votes(sphere, rng):
    pts = rng.uniform(-0.7, 0.7, (500, 3))
    counts = rng.integers(0, 12, 500)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    tris = rng.integers(0, sphere.n_triangles, ptr[-1])
    _same(*both(lambda k: k.normal_votes(pts, ptr, tris, sphere.centroids, sphere.normals)))


@needs_compiled
def test_tri_box_overlap(sphere, rng):
    t = rng.integers(0, sphere.n_triangles, 20000)
    c = rng.uniform(-0.6, 0.6, (t.size, 3))
    h = rng.uniform(0.01, 0.1, (t.size, 3))
    pa, pb, pc = (v[t] for v in sphere.corners)
    hit_c, hit_f = both(lambda k: k.tri_box_overlap(pa, pb, pc, c, h))
    assert np.array_equal(hit_c, hit_f)
    assert hit_c.any() and not hit_c.all()


@needs_compiled
@pytest.mark.parametrize("bf", [1, 2])
def test_gauss_loops_accept_read_only_tables(bf, rng):
    B = precompute_basis(bf)
    assert not B.phi.flags.writeable
    gpw = rng.normal(size=(50, B.nq))
    _same(*both(lambda k: k.gauss_loop_batch(B.phi, B.dphi[1], gpw)))
    _same(*both(lambda k: k.gauss_loop_matrix(B.dphi[0], B.phi, gpw[0])))


def test_pure_python_switch():
    env = dict(os.environ, IMGA_PURE_PYTHON="1")
    code = "from imga import kernels; print(kernels.BACKEND, kernels.compiled is None)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


@needs_compiled
def test_backend_benchmark_script(tmp_path):
    csv_path = tmp_path / "bench.csv"
    res = subprocess.run([sys.executable, os.path.join(PKG, "bench", "bench_backends.py"), "--repeats", "1",
                          "--csv", str(csv_path)], capture_output=True, text=True, timeout=600)
    assert res.returncode == 0, res.stderr
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("kernel,") and len(lines) == 7
    assert all(line.endswith("True") for line in lines[1:])
