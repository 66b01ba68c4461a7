import numpy as np
import pytest
import scipy.sparse.linalg as spl

from imga.classify import build_background_index, build_plans, mark_elements, mark_nodes
from imga.fem import Assembler, Discretization, PoissonForm, pin_rows
from imga.fem.assembly import AssemblyError, empty_rows, l2_error, read_matrix_market, write_matrix_market
from imga.fem.basis import evaluate, interpolate_to_gauss, precompute_basis
from imga.fem.elemental import compute_ele_matrix, compute_ele_matrix_loop, ele_matrices, ele_matrices_loop
from imga.fem.hanging import compute_hanging_corrections
from imga.geometry import Aabb, icosphere
from imga.octree import RefinementSpec, balance_2to1, build, enumerate_nodes, uniform
from imga.partition import DEPENDENT, tag_elements, weighted_sfc_partition

BOX = Aabb(np.zeros(3), np.ones(3))
PI = np.pi


def exact_sin(x):
    return np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1]) * np.sin(PI * x[:, 2])


def boundary_dofs(disc):
    X = disc.global_coords()
    return np.flatnonzero(np.any((X < 1e-12) | (X > 1 - 1e-12), axis=1)), X


def graded_tree():
    return build(RefinementSpec(BOX, 2, regions=[(Aabb(np.zeros(3), np.full(3, 0.3)), 4)]))


# --------------------------------------------------------------------------
# reference basis

def test_corner_basis_at_nearest_gauss_point():
    B = precompute_basis(1)
    g = 1 / np.sqrt(3)
    k = np.flatnonzero(np.all(np.isclose(B.points, -g), axis=1))[0]
    assert B.phi[0, k] == pytest.approx(((1 + g) / 2) ** 3, abs=1e-15)
    assert B.phi[0].max() == B.phi[0, k]


@pytest.mark.parametrize("bf", [1, 2])
def test_partition_of_unity(bf):
    B = precompute_basis(bf, bf + 2)
    assert np.abs(B.phi.sum(axis=0) - 1).max() <= 1e-13
    assert np.abs(B.dphi.sum(axis=1)).max() <= 1e-13
    assert np.abs(B.hess.sum(axis=2)).max() <= 1e-12
    assert B.phi.shape == ((bf + 1) ** 3, (bf + 2) ** 3)
    assert not B.phi.flags.writeable


@pytest.mark.parametrize("bf", [1, 2])
def test_basis_is_nodal_and_derivatives_match_differences(bf, rng):
    nodes = np.linspace(-1, 1, bf + 1)
    from imga.octree import slot_offsets
    xi = nodes[slot_offsets(bf)]
    phi, _ = evaluate(bf, xi)
    assert np.allclose(phi, np.eye(xi.shape[0]), atol=1e-14)
    p = rng.uniform(-0.9, 0.9, (5, 3))
    _, d = evaluate(bf, p)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd = (evaluate(bf, p + e)[0] - evaluate(bf, p - e)[0]) / (2 * eps)
        assert np.allclose(d[k], fd, atol=1e-8)


def test_invalid_basis_requests():
    with pytest.raises(ValueError):
        precompute_basis(3)
    with pytest.raises(ValueError):
        precompute_basis(2, 2)


@pytest.mark.parametrize("bf", [1, 2])
def test_interpolate_to_gauss(bf, rng):
    B = precompute_basis(bf)
    from imga.octree import slot_offsets
    xi_nodes = np.linspace(-1, 1, bf + 1)[slot_offsets(bf)]
    h = 0.25
    v, g = interpolate_to_gauss(B, np.full(B.n, 2.5), h)
    assert np.allclose(v, 2.5) and np.allclose(g, 0.0)
    # linear in physical coordinates x = h/2 (xi + 1)
    a, c = np.array([1.0, -2.0, 0.5]), 0.3
    lin = c + (h / 2 * (xi_nodes + 1)) @ a
    v, g = interpolate_to_gauss(B, lin, h)
    assert np.allclose(v, c + (h / 2 * (B.points + 1)) @ a, atol=1e-14)
    assert np.allclose(g, a, atol=1e-13)
    u = rng.normal(size=(3, B.n, 2))
    v, g = interpolate_to_gauss(B, u)
    phi, dphi = evaluate(bf, B.points)
    for e in range(3):
        for f in range(2):
            assert np.allclose(v[e, :, f], u[e, :, f] @ phi)
            assert np.allclose(g[e, :, f], np.einsum("n,knq->qk", u[e, :, f], dphi))


# --------------------------------------------------------------------------
# elemental products

def test_gemm_equals_gauss_loop(rng):
    for _ in range(100):
        bf = int(rng.integers(1, 3))
        B = precompute_basis(bf)
        ops = [B.phi] + list(B.dphi)
        op1, op2 = ops[rng.integers(4)], ops[rng.integers(4)]
        gp = rng.normal(size=B.nq)
        scale = rng.uniform(0.1, 2.0)
        a = compute_ele_matrix(op1, op2, gp, B.weights, scale)
        b = compute_ele_matrix_loop(op1, op2, gp, B.weights, scale)
        assert np.abs(a - b).max() <= 1e-12 * max(np.abs(b).max(), 1e-300)


def test_batched_paths_agree(rng):
    for bf in (1, 2):
        B = precompute_basis(bf)
        gp = rng.normal(size=(7, B.nq))
        w = np.broadcast_to(B.weights, gp.shape)
        s = rng.uniform(0.5, 1.5, 7)
        a = ele_matrices(B.phi, B.dphi[0], gp, w, s)
        b = ele_matrices_loop(B.phi, B.dphi[0], gp, w, s)
        per = np.broadcast_to(B.dphi[0], (7,) + B.dphi[0].shape)
        c = ele_matrices(B.phi, per, gp, w, s)
        ref = np.stack([compute_ele_matrix(B.phi, B.dphi[0], gp[e], B.weights, s[e]) for e in range(7)])
        for m in (a, b, c):
            assert np.allclose(m, ref, rtol=1e-12, atol=1e-13)


def test_shape_mismatch_rejected():
    B = precompute_basis(1)
    with pytest.raises(ValueError):
        compute_ele_matrix(B.phi, B.phi, np.ones(3), B.weights)


@pytest.mark.parametrize("bf", [1, 2])
def test_mass_and_stiffness(bf):
    B = precompute_basis(bf)
    dx = 0.37
    one = np.ones(B.nq)
    M = compute_ele_matrix(B.phi, B.phi, one, B.weights, (dx / 2) ** 3)
    assert M.sum() == pytest.approx(dx ** 3, rel=1e-13)
    K = sum(compute_ele_matrix(B.dphi[k], B.dphi[k], one, B.weights, dx / 2) for k in range(3))
    assert np.abs(K.sum(axis=1)).max() <= 1e-12
    assert np.allclose(K, K.T, atol=1e-14)


def test_unit_cube_trilinear_stiffness_diagonal():
    # int |grad phi|^2 = 3 * int N'^2 * (int N^2)^2 = 3 * 1 * (1/3)^2
    B = precompute_basis(1)
    K = sum(compute_ele_matrix(B.dphi[k], B.dphi[k], np.ones(B.nq), B.weights, 0.5) for k in range(3))
    assert np.allclose(np.diag(K), 1 / 3, atol=1e-14)


# --------------------------------------------------------------------------
# hanging corrections

def single_refined():
    return build(RefinementSpec(BOX, 1, regions=[(Aabb([0, 0, 0], [0.5, 0.5, 0.5]), 2)]))


def test_hanging_rows_bf1():
    t = single_refined()
    nm = enumerate_nodes(t, 1)
    hc = compute_hanging_corrections(t, nm)
    face = edge = 0
    for k, e in enumerate(hc.elements):
        M = hc.matrices[k]
        assert np.allclose(M.sum(axis=1), 1.0, atol=1e-14)
        for a in np.flatnonzero(nm.hanging[e]):
            nz = np.sort(M[a][np.abs(M[a]) > 1e-14])
            if nz.size == 4:
                assert np.allclose(nz, 0.25)
                face += 1
            else:
                assert nz.size == 2 and np.allclose(nz, 0.5)
                edge += 1
    assert face > 0 and edge > 0
    conforming = np.setdiff1d(np.arange(t.n_leaves), hc.elements)
    assert np.array_equal(hc.matrix(conforming[0], 8), np.eye(8))


@pytest.mark.parametrize("bf", [1, 2])
def test_corrected_stiffness_stays_symmetric(bf, rng):
    t = balance_2to1(graded_tree())
    nm = enumerate_nodes(t, bf)
    hc = compute_hanging_corrections(t, nm)
    n = (bf + 1) ** 3
    A = rng.normal(size=(n, n))
    K = A + A.T
    for M in hc.matrices[:20]:
        C = M.T @ K @ M
        assert np.allclose(C, C.T, atol=1e-12)
    # a corrected element interpolates fields from its targets exactly
    d = hc.element_dofs(nm)
    x = nm.coords
    f = 1 + x @ [0.3, -1.0, 2.0]
    for k, e in enumerate(hc.elements):
        assert np.allclose(hc.matrices[k] @ f[d[e]], f[nm.conn[e]], atol=1e-13)


# --------------------------------------------------------------------------
# global assembly

def test_uniform_laplacian_stencil():
    h = 0.25
    t = uniform(BOX, 2)
    d = Discretization(t, enumerate_nodes(t, 1))
    J, _ = Assembler(d, PoissonForm()).linearize(np.zeros(d.n_global))
    X = d.global_coords()
    c = np.flatnonzero(np.all(np.isclose(X, 0.5), axis=1))[0]
    row = J.getrow(c).toarray().ravel()
    dist = np.rint(np.abs(X - X[c]).sum(axis=1) / h).astype(int)
    cheb = np.rint(np.abs(X - X[c]).max(axis=1) / h).astype(int)
    expect = np.zeros_like(row)
    expect[c] = 8 * h / 3
    expect[(cheb == 1) & (dist == 2)] = -h / 6
    expect[(cheb == 1) & (dist == 3)] = -h / 12
    assert np.abs(row - expect).max() <= 1e-13


@pytest.mark.parametrize("bf,levels,rate", [(1, (2, 3, 4), 2.0), (2, (1, 2, 3), 3.0)])
def test_poisson_mms_rate(bf, levels, rate):
    errs = []
    for L in levels:
        t = uniform(BOX, L)
        d = Discretization(t, enumerate_nodes(t, bf))
        J, R = Assembler(d, PoissonForm(lambda x: 3 * PI ** 2 * exact_sin(x))).linearize(np.zeros(d.n_global))
        bd, _ = boundary_dofs(d)
        J, R = pin_rows(J, -R, bd, 0.0)
        u = spl.spsolve(J.tocsc(), R)
        errs.append(l2_error(d, u, lambda x: exact_sin(x)[:, None])[0])
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert rates[-1] == pytest.approx(rate, abs=0.3)
    assert np.all(np.diff(errs) < 0)


@pytest.mark.parametrize("bf", [1, 2])
def test_patch_test_on_graded_mesh(bf):
    t = balance_2to1(graded_tree())
    nm = enumerate_nodes(t, bf)
    assert nm.hanging_node.any()
    d = Discretization(t, nm)
    J, R = Assembler(d, PoissonForm()).linearize(np.zeros(d.n_global))
    bd, X = boundary_dofs(d)
    lin = 1 + 2 * X[:, 0] - X[:, 1] + 0.5 * X[:, 2]
    interior = np.setdiff1d(np.arange(d.n_global), bd)
    assert np.abs(J @ lin)[interior].max() <= 1e-11
    Jp, Rp = pin_rows(J, -R, bd, lin[bd])
    u = spl.spsolve(Jp.tocsc(), Rp)
    assert np.abs(u - lin).max() <= 1e-11
    assert abs(J - J.T).max() <= 1e-12


def immersed_disc(bf=1):
    mesh = icosphere(2, 0.27, (0.51, 0.48, 0.5))
    t = balance_2to1(build(RefinementSpec(BOX, 2, surface=mesh, surface_level=3)))
    index = build_background_index(t, mesh)
    markers = mark_elements(t, index, mesh)
    plan = build_plans(t, markers, index, mesh, max_split=1)
    nm = enumerate_nodes(t, bf)
    tags = tag_elements(t, weighted_sfc_partition(np.ones(t.n_leaves), 3), nm)
    flags = mark_nodes(t, markers, nm)
    return Discretization(t, nm, markers, plan, tags, inactive=flags.inactive_global)


def test_matrix_independent_of_visit_order_and_path():
    d = immersed_disc()
    form = PoissonForm(lambda x: x[:, 0], dirichlet=lambda x: x[:, 1])
    ref, rref = Assembler(d, form, order="sfc").linearize(np.zeros(d.n_global))
    others = [Assembler(d, form, order="reverse"), Assembler(d, form, order="dependent-first"),
              Assembler(d, form, order="sfc", chunk=7), Assembler(d, form, path="loop")]
    rng = np.random.default_rng(3)
    others.append(Assembler(d, form, order=rng.permutation(d.tree.n_leaves)))
    for a in others:
        J, R = a.linearize(np.zeros(d.n_global))
        assert abs(J - ref).max() <= 1e-12 * abs(ref).max()
        assert np.abs(R - rref).max() <= 1e-12 * np.abs(rref).max()
    with pytest.raises(ValueError):
        d.order("random")
    with pytest.raises(ValueError):
        Assembler(d, form, path="simd")


def test_dependent_batches_come_first():
    d = immersed_disc()
    seen = []
    Assembler(d, PoissonForm(), chunk=16,
              hook=lambda kind, batch: seen.append((kind, batch.copy()))).residual(np.zeros(d.n_global))
    order = np.concatenate([b for _, b in seen])
    assert {k for k, _ in seen} == {"residual"}
    dep = d.tags[order] == DEPENDENT
    assert dep.any() and (~dep).any()
    assert not np.any(dep[np.argmax(~dep):])
    # In elements are never visited
    assert np.all(d.markers[order] != 0)


def test_inactive_rows_are_empty():
    d = immersed_disc()
    J, _ = Assembler(d, PoissonForm()).linearize(np.zeros(d.n_global))
    assert set(d.inactive.tolist()) <= set(empty_rows(J).tolist())
    J2, _ = pin_rows(J, np.zeros(d.n_global), d.inactive)
    assert np.all(J2.diagonal()[d.inactive] == 1.0)


def test_missing_plan_rejected():
    d = immersed_disc()
    with pytest.raises(AssemblyError):
        Discretization(d.tree, d.nodemap, d.markers)


def test_residual_linear_in_source(rng):
    t = balance_2to1(graded_tree())
    d = Discretization(t, enumerate_nodes(t, 2))
    U = np.zeros(d.n_global)
    f = lambda x: np.cos(x[:, 0]) * x[:, 2]
    g = lambda x: x[:, 1] ** 2
    a, b = 1.7, -0.4
    rf = Assembler(d, PoissonForm(f)).residual(U)
    rg = Assembler(d, PoissonForm(g)).residual(U)
    rs = Assembler(d, PoissonForm(lambda x: a * f(x) + b * g(x))).residual(U)
    assert np.allclose(rs, a * rf + b * rg, atol=1e-14)
    # the residual at U equals J U for this linear form without source
    V = rng.normal(size=d.n_global)
    J, R = Assembler(d, PoissonForm()).linearize(V)
    assert np.allclose(R, J @ V, atol=1e-12)


def test_pin_rows_last_value_wins():
    import scipy.sparse as sp
    J = sp.csr_matrix(np.arange(16.0).reshape(4, 4))
    J2, R2 = pin_rows(J, np.ones(4), [1, 1, 3], [5.0, 6.0, 7.0])
    assert R2.tolist() == [1.0, 6.0, 1.0, 7.0]
    assert J2.toarray()[1].tolist() == [0, 1, 0, 0]
    assert J2.toarray()[0].tolist() == [0, 1, 2, 3]


def test_matrix_market_roundtrip(tmp_path):
    t = uniform(BOX, 1)
    d = Discretization(t, enumerate_nodes(t, 2))
    J, _ = Assembler(d, PoissonForm()).linearize(np.zeros(d.n_global))
    path = tmp_path / "K.mtx"
    write_matrix_market(path, J, comment="poisson")
    back = read_matrix_market(path)
    assert back.shape == J.shape
    assert abs(back - J).max() <= 1e-15 * abs(J).max()
