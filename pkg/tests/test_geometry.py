import logging
import struct

import numpy as np
import pytest
from scipy.optimize import linprog

from imga import geometry as geo
from imga.geometry import (Aabb, ClassificationError, InOut, StlParseError, SurfaceMesh, box_mesh,
                           classify_point, classify_points, closest_points_on_triangles, icosphere,
                           l_bracket, load_stl, normal_in_out, ray_trace_inside,
                           ray_trace_inside_many, save_stl, triangle_box_overlap,
                           triangle_obb_overlap)

from conftest import random_rotation

CUBE_ASCII = """solid cube
{facets}
endsolid cube
"""


def _cube_ascii():
    # written out independently of the library: two triangles per face
    v = lambda i: ((i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1)
    quads = [(0, 2, 6, 4), (1, 5, 7, 3), (0, 4, 5, 1), (2, 3, 7, 6), (0, 1, 3, 2), (4, 6, 7, 5)]
    out = []
    for a, b, c, d in quads:
        for tri in ((a, c, b), (a, d, c)):
            out.append("facet normal 0 0 0\n outer loop")
            out += [" vertex %d %d %d" % v(i) for i in tri]
            out.append(" endloop\nendfacet")
    return CUBE_ASCII.format(facets="\n".join(out))


# --------------------------------------------------------------------------
# STL I/O and mesh invariants

def test_ascii_cube_welds_to_eight_vertices(tmp_path):
    p = tmp_path / "cube.stl"
    p.write_text(_cube_ascii())
    m = load_stl(p)
    assert m.n_triangles == 12
    assert m.vertices.shape == (8, 3)
    assert m.is_watertight()
    assert m.volume() == pytest.approx(1.0, abs=1e-14)


def test_icosphere_counts_and_watertight():
    m = icosphere(4)
    assert m.vertices.shape[0] == 2562
    assert m.n_triangles == 5120
    assert m.is_watertight()
    # edge sharing counted directly: E = 3F/2 and Euler V - E + F = 2
    assert m.vertices.shape[0] - 3 * m.n_triangles // 2 + m.n_triangles == 2


def test_truncated_binary_reports_offset(tmp_path):
    p = tmp_path / "s.stl"
    save_stl(icosphere(1), p, binary=True)
    data = p.read_bytes()
    p.write_bytes(data[:84 + 50 * 7 + 13])
    with pytest.raises(StlParseError) as err:
        load_stl(p)
    assert err.value.offset == 84 + 50 * 7


def test_malformed_ascii_reports_offset(tmp_path):
    p = tmp_path / "bad.stl"
    text = _cube_ascii().replace(" vertex 1 1 0", " vertex 1 x 0", 1)
    p.write_text(text)
    with pytest.raises(StlParseError) as err:
        load_stl(p)
    assert 0 < err.value.offset < len(text)


def test_empty_file_is_an_error(tmp_path):
    p = tmp_path / "e.stl"
    p.write_bytes(b"")
    with pytest.raises(StlParseError):
        load_stl(p)


@pytest.mark.parametrize("binary", [True, False])
def test_save_load_roundtrip_idempotent(tmp_path, binary):
    m = icosphere(3, 0.7, (1.0, -2.0, 0.5))
    p1, p2 = tmp_path / "a.stl", tmp_path / "b.stl"
    save_stl(m, p1, binary=binary)
    m1 = load_stl(p1)
    save_stl(m1, p2, binary=binary)
    m2 = load_stl(p2)
    assert (m1.n_triangles, m1.vertices.shape) == (m.n_triangles, m.vertices.shape)
    assert (m2.n_triangles, m2.vertices.shape) == (m1.n_triangles, m1.vertices.shape)
    tol = 1e-6 if binary else 1e-14
    assert np.allclose(m2.vertices[m2.triangles], m.vertices[m.triangles], atol=tol)


def test_zero_area_triangles_dropped_with_warning(tmp_path, caplog):
    m = box_mesh()
    v = np.vstack([m.vertices, [[0.5, 0.5, 0.5]]])
    tris = np.vstack([m.triangles, [[8, 8, 0]]])
    corners = v[tris]
    rec = np.zeros(len(tris), dtype=geo._BINARY_RECORD)
    rec["v"] = corners
    p = tmp_path / "z.stl"
    with open(p, "wb") as fh:
        fh.write(b"x" * 80 + struct.pack("<I", len(tris)) + rec.tobytes())
    with caplog.at_level(logging.WARNING):
        out = load_stl(p)
    assert out.n_triangles == 12
    assert "dropped 1 zero-area" in caplog.text


def test_normals_are_unit_and_follow_winding(rng):
    m = icosphere(2, 1.3, (0.2, 0.1, -0.4))
    assert np.all(np.abs(np.linalg.norm(m.normals, axis=1) - 1.0) < 1e-12)
    a, b, c = m.corners
    cr = np.cross(b - a, c - a)
    assert np.allclose(m.normals, cr / np.linalg.norm(cr, axis=1)[:, None], atol=1e-15)
    # outward: normals point away from the centre
    assert np.all(np.einsum("ij,ij->i", m.centroids - [0.2, 0.1, -0.4], m.normals) > 0)


def test_winding_overrides_stored_normals(tmp_path):
    m = box_mesh()
    rec = np.zeros(m.n_triangles, dtype=geo._BINARY_RECORD)
    rec["v"] = np.stack(m.corners, axis=1)
    rec["normal"] = -m.normals
    p = tmp_path / "n.stl"
    p.write_bytes(b" " * 80 + struct.pack("<I", m.n_triangles) + rec.tobytes())
    assert np.allclose(load_stl(p).normals, m.normals)


def test_l_bracket_closed_with_expected_volume():
    m = l_bracket(size=1.0, thickness=0.5)
    assert m.is_watertight()
    assert m.volume() == pytest.approx(3 * 0.5, rel=1e-14)


def test_aabb_rejects_inverted_box():
    with pytest.raises(ValueError):
        Aabb([1, 0, 0], [0, 1, 1])


def test_degenerate_triangle_rejected():
    with pytest.raises(ValueError):
        SurfaceMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))


# --------------------------------------------------------------------------
# triangle / box overlap

def _lp_overlap(tri, box):
    """Exact oracle: is some convex combination of the vertices inside the box?"""
    A_ub = np.vstack([tri.T, -tri.T])
    b_ub = np.concatenate([box.hi, -box.lo])
    res = linprog(np.zeros(3), A_ub=A_ub, b_ub=b_ub, A_eq=np.ones((1, 3)), b_eq=[1.0],
                  bounds=[(0, None)] * 3, method="highs")
    return res.status == 0


def test_triangle_inside_box():
    box = Aabb(np.zeros(3), np.ones(3))
    tri = np.array([[0.2, 0.2, 0.2], [0.8, 0.3, 0.4], [0.5, 0.7, 0.6]])
    assert triangle_box_overlap(tri, box)


def test_parallel_triangle_just_outside():
    box = Aabb(np.zeros(3), np.ones(3))
    tri = np.array([[-1.0, -1.0, 1.001], [3.0, -1.0, 1.001], [-1.0, 3.0, 1.001]])
    assert not triangle_box_overlap(tri, box)
    tri[:, 2] = 1.0
    assert triangle_box_overlap(tri, box)


def test_triangle_piercing_edge_with_vertices_outside():
    box = Aabb(np.zeros(3), np.ones(3))
    # slices the corner edge x = y = 1 near its middle
    tri = np.array([[1.3, 0.7, -0.5], [0.7, 1.3, -0.5], [1.0, 1.0, 1.5]]) + [-0.05, -0.05, 0]
    assert not np.any(np.all((tri >= 0) & (tri <= 1), axis=1))
    u, v = np.meshgrid(np.linspace(0, 1, 400), np.linspace(0, 1, 400))
    keep = u + v <= 1
    pts = tri[0] + u[keep, None] * (tri[1] - tri[0]) + v[keep, None] * (tri[2] - tri[0])
    assert np.any(np.all((pts >= 0) & (pts <= 1), axis=1))
    assert triangle_box_overlap(tri, box)


def test_overlap_matches_linear_programming_oracle(rng):
    box = Aabb(np.zeros(3), np.ones(3))
    agree = 0
    for _ in range(400):
        c = rng.uniform(-0.5, 1.5, 3)
        tri = c + rng.normal(scale=0.5, size=(3, 3))
        margin = geo._sat_margin(tri, box.center, np.eye(3), box.half)
        if abs(margin) < 1e-9:
            continue
        assert triangle_box_overlap(tri, box) == _lp_overlap(tri, box)
        agree += 1
    assert agree > 350


def test_overlap_invariant_under_rigid_motion(rng):
    box = Aabb(np.zeros(3), np.array([1.0, 0.5, 2.0]))
    checked = 0
    for _ in range(300):
        tri = rng.uniform(-0.5, 2.0, 3) + rng.normal(scale=0.6, size=(3, 3))
        if abs(geo._sat_margin(tri, box.center, np.eye(3), box.half)) < 1e-9:
            continue
        R, t = random_rotation(rng), rng.normal(size=3)
        moved = tri @ R.T + t
        got = triangle_obb_overlap(moved, R @ box.center + t, R.T, box.half, tol=1e-9)
        assert got == triangle_box_overlap(tri, box)
        checked += 1
    assert checked > 250


# --------------------------------------------------------------------------
# in/out predicates

def test_ray_trace_center_and_far_point():
    m = icosphere(4, 0.5, (1.0, 2.0, 3.0))
    assert ray_trace_inside([1.0, 2.0, 3.0], m) == InOut.IN
    assert ray_trace_inside([2.0, 2.0, 3.0], m) == InOut.OUT


def test_ray_trace_matches_analytic_sphere_off_the_sagitta_band(rng):
    c, r = np.array([0.1, -0.2, 0.3]), 0.5
    m = icosphere(4, r, c)
    inner = np.abs(np.einsum("ij,ij->i", m.centroids - c, m.normals)).min()
    pts = c + rng.uniform(-1.5 * r, 1.5 * r, size=(100_000, 3))
    d = np.linalg.norm(pts - c, axis=1)
    clear = (d < inner - 1e-9) | (d > r + 1e-9)
    got = ray_trace_inside_many(pts[clear], m)
    assert np.array_equal(got, d[clear] < r)
    assert clear.mean() > 0.95


def test_points_on_surface_are_in():
    m = box_mesh()
    assert ray_trace_inside([0.25, 0.5, 0.0], m) == InOut.IN


def test_persistent_grazing_raises(monkeypatch):
    m = box_mesh()
    monkeypatch.setattr(geo, "RAY_DIRECTIONS", np.tile([1.0, 0.0, 0.0], (geo.MAX_RECASTS, 1)))
    # the +x ray from here crosses the x = 0 face on its diagonal
    with pytest.raises(ClassificationError):
        ray_trace_inside_many(np.array([[-1.0, 0.5, 0.5]]), m)


def test_grazing_ray_is_recast():
    m = box_mesh()
    assert ray_trace_inside([-1.0, 0.5, 0.5], m) == InOut.OUT
    assert ray_trace_inside([0.3, 0.3, 0.3], m) == InOut.IN


def test_normal_test_single_triangle():
    m = SurfaceMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    assert normal_in_out([0.2, 0.2, 1.0], [0], m) == InOut.OUT
    assert normal_in_out([0.2, 0.2, -1.0], [0], m) == InOut.IN


def test_normal_test_convex_patch_behind_all():
    m = icosphere(1)
    top = np.argsort(-m.centroids[:, 2])[:5]
    assert normal_in_out([0.0, 0.0, 0.0], top, m) == InOut.IN
    assert normal_in_out([0.0, 0.0, 3.0], top, m) == InOut.OUT


def test_normal_test_sharp_corner_conflicts():
    m = l_bracket()
    # faces x = 2 and y = 1 (x in [1, 2]) meet at a sharp edge; the point sits
    # outside, in front of one face and behind the other
    fx = np.flatnonzero(np.isclose(m.centroids[:, 0], 2.0))
    fy = np.flatnonzero(np.isclose(m.centroids[:, 1], 1.0) & (m.centroids[:, 0] > 1.0))
    p = np.array([2.3, 0.8, 0.25])
    tris = np.concatenate([fx, fy])
    assert normal_in_out(p, tris, m) == InOut.CONFLICT
    verdict, fell_back = classify_point(p, tris, m)
    assert fell_back
    assert verdict == ray_trace_inside(p, m) == InOut.OUT


def test_normal_test_reentrant_corner_inside_point():
    m = l_bracket()
    fx = np.flatnonzero(np.isclose(m.centroids[:, 0], 1.0) & (m.centroids[:, 1] > 1.0))
    fy = np.flatnonzero(np.isclose(m.centroids[:, 1], 1.0) & (m.centroids[:, 0] > 1.0))
    tris = np.concatenate([fx, fy])
    assert normal_in_out([1.6, 1.2, 0.25], tris, m) == InOut.OUT
    p = np.array([0.8, 1.2, 0.25])
    assert normal_in_out(p, tris, m) == InOut.CONFLICT
    assert classify_point(p, tris, m) == (InOut.IN, True)


def test_normal_test_invariant_to_scaling_of_d(rng):
    m = icosphere(2)
    tris = np.arange(m.n_triangles)
    for p in rng.normal(scale=0.8, size=(50, 3)):
        # scaling the surface about p scales every d = p - centroid, normals unchanged
        for s in (1e-3, 0.37, 25.0):
            scaled = m.transformed(translation=p - s * p, scale=s)
            assert normal_in_out(p, tris, scaled) == normal_in_out(p, tris, m)


def test_classify_point_outside_flat_region_no_fallback():
    m = icosphere(4)
    near = np.argmax(m.centroids[:, 0])
    p = m.centroids[near] + 0.01 * m.normals[near]
    verdict, fell_back = classify_point(p, [near], m)
    assert verdict == InOut.OUT and not fell_back


def test_classify_points_empty_window_falls_back():
    m = icosphere(2)
    inside, fb = classify_points(np.array([[0.0, 0, 0], [2.0, 0, 0]]), [0, 0, 0],
                                 np.zeros(0, np.int64), m)
    assert fb.all()
    assert inside.tolist() == [True, False]


def test_normal_test_requires_triangles():
    with pytest.raises(ValueError):
        normal_in_out([0, 0, 0], [], icosphere(0))


# --------------------------------------------------------------------------
# closest point

def test_closest_point_matches_dense_barycentric_search(rng):
    n = 40
    a, b, c = (rng.normal(size=(n, 3)) for _ in range(3))
    p = rng.normal(scale=2.0, size=(n, 3))
    got = closest_points_on_triangles(p, a, b, c)
    s, t = np.meshgrid(np.linspace(0, 1, 301), np.linspace(0, 1, 301))
    keep = s + t <= 1
    s, t = s[keep], t[keep]
    for i in range(n):
        cand = a[i] + s[:, None] * (b[i] - a[i]) + t[:, None] * (c[i] - a[i])
        dmin = np.linalg.norm(cand - p[i], axis=1).min()
        assert np.linalg.norm(got[i] - p[i]) <= dmin + 1e-12
        # the answer lies on the triangle
        M = np.stack([b[i] - a[i], c[i] - a[i]], axis=1)
        lam, *_ = np.linalg.lstsq(M, got[i] - a[i], rcond=None)
        assert np.allclose(M @ lam, got[i] - a[i], atol=1e-10)
        assert lam.min() >= -1e-10 and lam.sum() <= 1 + 1e-10
