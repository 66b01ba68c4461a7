from math import factorial

import numpy as np
import pytest

from imga import geometry as geo
from imga.classify import (Marker, adaptive_quadrature, assign_surface_points, build_background_index,
                           build_plans, classify_in_leaves, fluid_volume, mark_elements, mark_nodes, tensor_gauss,
                           triangle_rule)
from imga.geometry import Aabb, box_mesh, icosphere
from imga.octree import RefinementSpec, balance_2to1, build, enumerate_nodes, uniform

# an axis-aligned solid whose faces avoid every lattice plane used below
SOLID_LO = np.array([0.31, 0.27, 0.34])
SOLID_HI = np.array([0.66, 0.71, 0.62])


def solid_setup(level=4):
    tree = uniform(Aabb(np.zeros(3), np.ones(3)), level)
    mesh = box_mesh(SOLID_LO, SOLID_HI)
    return tree, mesh, build_background_index(tree, mesh)


def sphere_setup(level, surface_level=None, radius=0.3, center=(0.52, 0.49, 0.505), ico=3):
    mesh = icosphere(ico, radius, center)
    spec = RefinementSpec(Aabb(np.zeros(3), np.ones(3)), level, surface=mesh,
                          surface_level=surface_level or level)
    tree = balance_2to1(build(spec))
    return tree, mesh, build_background_index(tree, mesh)


# --------------------------------------------------------------------------
# background index

def test_points_outside_the_box_rejected():
    tree, mesh, index = solid_setup(2)
    pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])
    with pytest.raises(ValueError, match="inside the octree box"):
        classify_in_leaves(pts, tree.locate(pts), index, mesh)


def test_own_lists_match_pairwise_sat():
    tree, mesh, index = sphere_setup(2, 3, ico=1)
    tris = np.stack(mesh.corners, axis=1)
    for leaf in range(tree.n_leaves):
        c = 0.5 * (tree.lower[leaf] + tree.upper[leaf])
        half = np.full(3, 0.5 * tree.h[leaf])
        ref = [t for t in range(mesh.n_triangles) if geo._sat_margin(tris[t], c, np.eye(3), half) <= 0]
        assert index.own(leaf).tolist() == ref
    for t in range(mesh.n_triangles):
        assert all(t in index.own(l) for l in index.leaves_of(t))


def test_window_is_union_over_touching_leaves():
    tree, mesh, index = sphere_setup(2, 4, ico=1)
    lo, hi = tree.anchors, tree.anchors + tree.sizes[:, None]
    for leaf in range(0, tree.n_leaves, 7):
        touch = np.flatnonzero(np.all((lo <= hi[leaf]) & (hi >= lo[leaf]), axis=1))
        ref = np.unique(np.concatenate([index.own(l) for l in touch]))
        assert np.array_equal(index.window(leaf), ref)


# --------------------------------------------------------------------------
# element and node marking

def test_markers_against_analytic_box():
    tree, mesh, index = solid_setup()
    m = mark_elements(tree, index, mesh)
    lo, hi = tree.lower, tree.upper
    inside = np.all((lo > SOLID_LO) & (hi < SOLID_HI), axis=1)
    apart = np.any((hi < SOLID_LO) | (lo > SOLID_HI), axis=1)
    ref = np.where(inside, Marker.IN, np.where(apart, Marker.OUT, Marker.INTERCEPTED))
    assert np.array_equal(m, ref)


def test_in_never_touches_out():
    tree, mesh, index = sphere_setup(3, 5)
    m = mark_elements(tree, index, mesh)
    assert (m == Marker.IN).any() and (m == Marker.OUT).any()
    ins, outs = np.flatnonzero(m == Marker.IN), np.flatnonzero(m == Marker.OUT)
    lo, hi = tree.anchors, tree.anchors + tree.sizes[:, None]
    touch = np.all((lo[ins, None] <= hi[None, outs]) & (hi[ins, None] >= lo[None, outs]), axis=2)
    assert not touch.any()


def test_in_volume_grows_towards_sphere():
    r = 0.3
    vols = []
    for lvl in (3, 4, 5):
        tree, mesh, index = sphere_setup(lvl, ico=4)
        m = mark_elements(tree, index, mesh)
        vols.append(tree.volumes[m == Marker.IN].sum())
    assert vols[0] < vols[1] < vols[2] < 4 / 3 * np.pi * r ** 3


def test_inactive_nodes_are_inside_the_solid():
    tree, mesh, index = solid_setup(4)
    m = mark_elements(tree, index, mesh)
    for bf in (1, 2):
        nm = enumerate_nodes(tree, bf)
        flags = mark_nodes(tree, m, nm, index, mesh)
        assert flags.inactive_global.size > 0
        inactive = np.isin(nm.global_index, flags.inactive_global) & ~nm.hanging_node
        x = nm.coords[inactive]
        assert np.all((x > SOLID_LO) & (x < SOLID_HI))
        assert np.array_equal(flags.inside, np.all((nm.coords >= SOLID_LO) & (nm.coords <= SOLID_HI), axis=1))


# --------------------------------------------------------------------------
# quadrature rules

@pytest.mark.parametrize("n", [1, 2, 3])
def test_tensor_gauss_exact_to_degree(n):
    x, w = tensor_gauss(n)
    assert w.sum() == pytest.approx(8.0, abs=1e-14)
    for p in range(2 * n):
        exact = 2.0 / (p + 1) if p % 2 == 0 else 0.0
        assert (w * x[:, 0] ** p * x[:, 2] ** 0).sum() == pytest.approx(exact * 4, abs=1e-13)


def test_triangle_rules_integrate_monomials():
    # int over the unit right triangle of x^a y^b = a! b! / (a + b + 2)!
    for name, deg in (("1pt", 1), ("7pt", 5)):
        bary, w = triangle_rule(name)
        x, y = bary[:, 1], bary[:, 2]
        for a in range(deg + 1):
            for b in range(deg + 1 - a):
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                assert 0.5 * (w * x ** a * y ** b).sum() == pytest.approx(exact, abs=1e-15)
    with pytest.raises(ValueError):
        triangle_rule("13pt")


# --------------------------------------------------------------------------
# adaptive volume quadrature

def test_retained_plus_discarded_is_full_element():
    tree, mesh, index = sphere_setup(3, 4)
    m = mark_elements(tree, index, mesh)
    plan = build_plans(tree, m, index, mesh, max_split=2)
    per = np.bincount(np.repeat(np.arange(plan.elements.size), plan.n_volume), weights=plan.vol_w,
                      minlength=plan.elements.size)
    assert np.abs(per + plan.discarded_w - 8.0).max() <= 1e-13
    assert np.all(np.abs(plan.vol_xi) <= 1.0)


def half_space(x0):
    """Solid x < x0 built from a large box that covers the unit cube elsewhere."""
    return box_mesh([-5.0, -5.0, -5.0], [x0, 5.0, 5.0])


@pytest.mark.parametrize("x0", [0.25, 0.3])
def test_half_space_fraction(x0):
    tree = uniform(Aabb(np.zeros(3), np.ones(3)), 1)
    mesh = half_space(x0)
    index = build_background_index(tree, mesh)
    leaf = int(tree.locate([[0.1, 0.1, 0.1]])[0])
    exact = 8.0 * (0.5 - x0) / 0.5
    errs = []
    for s in range(0, 5):
        xi, w, disc, _ = adaptive_quadrature(tree, leaf, index, mesh, max_split=s)
        errs.append(abs(w.sum() - exact))
        assert w.sum() + disc == pytest.approx(8.0, abs=1e-13)
        # the cut slab is at most one sub-cell layer wide
        assert errs[-1] <= 8.0 / 2 ** s + 1e-12
    if x0 == 0.25:
        assert errs[-1] <= 1e-12
    else:
        assert errs[-1] < errs[0]


def test_fluid_volume_of_box_solid_converges():
    tree, mesh, index = solid_setup(3)
    m = mark_elements(tree, index, mesh)
    exact = 1.0 - np.prod(SOLID_HI - SOLID_LO)
    err = []
    for s in (0, 1, 2, 3):
        plan = build_plans(tree, m, index, mesh, max_split=s)
        err.append(abs(fluid_volume(tree, m, plan) - exact))
    assert err[-1] < err[0]
    assert err[-1] < 0.01 * exact


def test_corner_rule_never_deeper_than_surface_rule():
    tree, mesh, index = sphere_setup(3, 4)
    m = mark_elements(tree, index, mesh)
    a = build_plans(tree, m, index, mesh, max_split=2, split_rule="corners")
    b = build_plans(tree, m, index, mesh, max_split=2, split_rule="surface")
    assert np.all(a.split_level <= b.split_level)
    with pytest.raises(ValueError):
        build_plans(tree, m, index, mesh, max_split=1, split_rule="random")


# --------------------------------------------------------------------------
# surface quadrature

def test_surface_weights_sum_to_area():
    tree, mesh, index = sphere_setup(3, 4)
    m = mark_elements(tree, index, mesh)
    plan = build_plans(tree, m, index, mesh)
    assert plan.surf_w.sum() == pytest.approx(mesh.areas.sum(), rel=1e-13)
    assert np.allclose(plan.surf_n, mesh.normals[plan.surf_tri])
    owner = np.repeat(plan.elements, plan.n_surface)
    assert np.all(plan.surf_x >= tree.lower[owner] - 1e-14)
    assert np.all(plan.surf_x <= tree.upper[owner] + 1e-14)


def test_shared_face_points_go_to_lowest_leaf():
    tree = uniform(Aabb(np.zeros(3), np.ones(3)), 1)
    pts = np.array([[0.5, 0.25, 0.25], [0.5, 0.5, 0.5], [0.2, 0.3, 0.4]])
    got = assign_surface_points(tree, pts)
    for p, leaf in zip(pts, got):
        holders = np.flatnonzero(np.all((tree.lower <= p) & (p <= tree.upper), axis=1))
        assert leaf == holders.min()
