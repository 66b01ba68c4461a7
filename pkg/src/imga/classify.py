"""Element and node marking, triangle association and immersed quadrature."""
import enum
import logging
from dataclasses import dataclass
from itertools import product

import numpy as np

from .geometry import classify_points, triangles_boxes_overlap
from .octree import octant_triangle_pairs

log = logging.getLogger(__name__)


class Marker(enum.IntEnum):
    IN = 0
    INTERCEPTED = 1
    OUT = 2


def csr_gather(ptr, data, rows):
    """Concatenate CSR rows ``rows``; returns (new_ptr, values)."""
    rows = np.asarray(rows, np.int64)
    start = ptr[rows]
    count = ptr[rows + 1] - start
    new_ptr = np.zeros(rows.size + 1, np.int64)
    np.cumsum(count, out=new_ptr[1:])
    idx = np.repeat(start - new_ptr[:-1], count) + np.arange(new_ptr[-1])
    return new_ptr, data[idx]


def _csr(rows, cols, n):
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    ptr = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=ptr[1:])
    return ptr, cols


@dataclass
class BackgroundIndex:
    """Per-leaf triangle lists (exact SAT) plus the enlarged test window.

    The window of a leaf is the union of its own list and those of every leaf
    sharing a face, edge or vertex with it.
    """
    ptr: np.ndarray
    tris: np.ndarray
    win_ptr: np.ndarray
    win_tris: np.ndarray
    tri_ptr: np.ndarray
    tri_leaves: np.ndarray

    def own(self, leaf):
        return self.tris[self.ptr[leaf]:self.ptr[leaf + 1]]

    def window(self, leaf):
        return self.win_tris[self.win_ptr[leaf]:self.win_ptr[leaf + 1]]

    def leaves_of(self, tri):
        return self.tri_leaves[self.tri_ptr[tri]:self.tri_ptr[tri + 1]]

    @property
    def counts(self):
        return np.diff(self.ptr)


def build_background_index(tree, mesh):
    n = tree.n_leaves
    leaf, tri = octant_triangle_pairs(mesh, tree.box.lo, tree.cell, tree.anchors,
                                      tree.levels, tree.max_level)
    ptr, tris = _csr(leaf, tri, n)
    tri_ptr, tri_leaves = _csr(tri, leaf, mesh.n_triangles)
    busy = np.flatnonzero(np.diff(ptr) > 0)
    nb_ptr, nbrs = tree.neighbor_probes(busy)
    src = np.repeat(busy, np.diff(nb_ptr))
    # each neighbour of a busy leaf inherits that leaf's triangles
    g_ptr, g_tris = csr_gather(ptr, tris, src)
    dst = np.repeat(nbrs, np.diff(g_ptr))
    rows = np.concatenate([leaf, dst])
    cols = np.concatenate([tri, g_tris])
    key = np.unique(rows * mesh.n_triangles + cols)
    win_ptr, win_tris = _csr(key // mesh.n_triangles, key % mesh.n_triangles, n)
    return BackgroundIndex(ptr, tris, win_ptr, win_tris, tri_ptr, tri_leaves)


def classify_in_leaves(points, leaves, index, mesh):
    """Classify points with the window of the leaf each one lies in."""
    points = np.asarray(points, float).reshape(-1, 3)
    leaves = np.asarray(leaves, np.int64)
    if leaves.size and leaves.min() < 0:
        raise ValueError("every point must lie inside the octree box")
    inside = np.zeros(points.shape[0], dtype=bool)
    fallback = np.zeros(points.shape[0], dtype=bool)
    # bound the gathered window size; windows can hold hundreds of triangles
    cost = np.cumsum(np.diff(index.win_ptr)[leaves] + 1)
    cuts = np.searchsorted(cost, np.arange(_GATHER_LIMIT, cost[-1] if cost.size else 0,
                                           _GATHER_LIMIT))
    for s, e in zip(np.r_[0, cuts], np.r_[cuts, points.shape[0]]):
        if e <= s:
            continue
        ptr, tris = csr_gather(index.win_ptr, index.win_tris, leaves[s:e])
        inside[s:e], fallback[s:e] = classify_points(points[s:e], ptr, tris, mesh)
    return inside, fallback


_GATHER_LIMIT = 1 << 22


def _corner_lattice(tree):
    offs = np.array(list(product((0, 1), repeat=3)))[:, ::-1]
    return tree.anchors[:, None, :] + offs[None] * tree.sizes[:, None, None]


def _classify_lattice(tree, lattice, index, mesh):
    """Classify lattice points (finest-cell units); returns (inside, fallback)."""
    n = 1 << tree.max_level
    cells = np.minimum(lattice, n - 1)
    leaves = tree.locate_cells(cells)
    pts = tree.box.lo + lattice * tree.cell
    return classify_in_leaves(pts, leaves, index, mesh)


def mark_elements(tree, index, mesh, return_corners=False):
    """In when every corner is In and no triangle touches the leaf, Out likewise,
    Intercepted otherwise."""
    corners = _corner_lattice(tree).reshape(-1, 3)
    uniq, inv = np.unique(corners, axis=0, return_inverse=True)
    inside, fallback = _classify_lattice(tree, uniq, index, mesh)
    per = inside[inv.ravel()].reshape(tree.n_leaves, 8)
    touched = index.counts > 0
    markers = np.full(tree.n_leaves, Marker.INTERCEPTED, dtype=np.int8)
    markers[per.all(axis=1) & ~touched] = Marker.IN
    markers[~per.any(axis=1) & ~touched] = Marker.OUT
    if return_corners:
        return markers, per, fallback
    return markers


@dataclass
class NodeFlags:
    inside: np.ndarray     # per unique node
    active: np.ndarray     # per unique node; False for hanging and pinned nodes
    inactive_global: np.ndarray  # global indices pinned by the solver


def mark_nodes(tree, markers, nodemap, index=None, mesh=None):
    """Flag nodes as In/Out and find the pinned (inactive) independent nodes.

    An independent node is active when it carries weight for some non-In
    element, either directly or as the parent of a hanging node.
    """
    fluid = np.flatnonzero(markers != Marker.IN)
    touched = np.unique(nodemap.conn[fluid])
    used = np.unique(nodemap.constraint[touched].indices)
    active_g = np.zeros(nodemap.n_global, dtype=bool)
    active_g[used] = True
    active = np.zeros(nodemap.n_nodes, dtype=bool)
    indep = ~nodemap.hanging_node
    active[indep] = active_g[nodemap.global_index[indep]]
    if index is not None and mesh is not None:
        scale = nodemap.bf
        lattice = nodemap.lattice
        n = 1 << tree.max_level
        cells = np.minimum(lattice // scale, n - 1)
        leaves = tree.locate_cells(cells)
        inside, _ = classify_in_leaves(nodemap.coords, leaves, index, mesh)
    else:
        in_only = np.ones(nodemap.n_nodes, dtype=bool)
        in_only[touched] = False
        inside = in_only
    return NodeFlags(inside, active, np.flatnonzero(~active_g))


# --------------------------------------------------------------------------
# Quadrature

def gauss_1d(n):
    return np.polynomial.legendre.leggauss(n)


def tensor_gauss(n):
    """Tensor Gauss rule on [-1, 1]^3, x fastest; returns (points, weights)."""
    x, w = gauss_1d(n)
    Z, Y, X = np.meshgrid(x, x, x, indexing="ij")
    WZ, WY, WX = np.meshgrid(w, w, w, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    return pts, (WX * WY * WZ).ravel()


_S15 = np.sqrt(15.0)
_A1, _A2 = (6 - _S15) / 21, (6 + _S15) / 21
_W1, _W2 = (155 - _S15) / 1200, (155 + _S15) / 1200


def triangle_rule(name="7pt"):
    """Barycentric points and weights (summing to 1) on a triangle."""
    if name in ("1pt", "centroid", 1):
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if name not in ("7pt", 7):
        raise ValueError(f"unknown triangle rule {name!r}")
    bary = [[1 / 3, 1 / 3, 1 / 3]]
    weights = [9 / 40]
    for a, w in ((_A1, _W1), (_A2, _W2)):
        b = 1 - 2 * a
        bary += [[b, a, a], [a, b, a], [a, a, b]]
        weights += [w] * 3
    return np.array(bary), np.array(weights)


@dataclass
class QuadraturePlan:
    """Immersed quadrature for the Intercepted elements.

    Volume points are in reference coordinates of their element with weights
    summing to 8 over a full element. Surface points are physical, weights
    already multiplied by triangle area.
    """
    elements: np.ndarray       # intercepted leaf ids, ascending
    vol_ptr: np.ndarray        # CSR over ``elements``
    vol_xi: np.ndarray
    vol_w: np.ndarray
    discarded_w: np.ndarray    # per element
    split_level: np.ndarray    # deepest subdivision used per element
    surf_ptr: np.ndarray
    surf_x: np.ndarray
    surf_w: np.ndarray
    surf_n: np.ndarray
    surf_tri: np.ndarray
    ngp: int

    def slot(self, leaf):
        pos = np.searchsorted(self.elements, leaf)
        if pos >= self.elements.size or self.elements[pos] != leaf:
            raise KeyError(f"leaf {leaf} has no immersed quadrature plan")
        return pos

    def volume_points(self, leaf):
        k = self.slot(leaf)
        s = slice(self.vol_ptr[k], self.vol_ptr[k + 1])
        return self.vol_xi[s], self.vol_w[s]

    def surface_points(self, leaf):
        k = self.slot(leaf)
        s = slice(self.surf_ptr[k], self.surf_ptr[k + 1])
        return self.surf_x[s], self.surf_w[s], self.surf_n[s]

    @property
    def n_volume(self):
        return np.diff(self.vol_ptr)

    @property
    def n_surface(self):
        return np.diff(self.surf_ptr)


_CORNERS = np.array(list(product((0, 1), repeat=3)))[:, ::-1].astype(float)


def _touched(tree, elements, slot, lo, size, index, mesh):
    """Sub-cells overlapped by any triangle of their element's own list."""
    o_ptr, tris = csr_gather(index.ptr, index.tris, elements[slot])
    owner = np.repeat(np.arange(slot.size), np.diff(o_ptr))
    h = tree.h[elements[slot]]
    blo = tree.lower[elements[slot]] + 0.5 * (lo + 1.0) * h[:, None]
    bhi = blo + 0.5 * size[:, None] * h[:, None]
    hit = triangles_boxes_overlap(mesh, tris, blo[owner], bhi[owner])
    out = np.zeros(slot.size, dtype=bool)
    out[owner[hit]] = True
    return out


def _volume_plan(tree, elements, index, mesh, max_split, ngp, split_rule="surface"):
    gp, gw = tensor_gauss(ngp)
    # active sub-cells: (element slot, lower reference corner, depth)
    slot = np.arange(elements.size)
    lo = np.full((elements.size, 3), -1.0)
    depth = np.zeros(elements.size, dtype=np.int64)
    out_slot, out_xi, out_w, disc = [], [], [], np.zeros(elements.size)
    split_level = np.zeros(elements.size, dtype=np.int64)
    h = tree.h[elements]
    phys_lo = tree.lower[elements]
    while slot.size:
        size = 2.0 / (1 << depth)
        if depth[0] < max_split:
            xi = lo[:, None, :] + _CORNERS[None] * size[:, None, None]
            pts = phys_lo[slot][:, None, :] + 0.5 * (xi + 1.0) * h[slot][:, None, None]
            inside, _ = classify_in_leaves(pts.reshape(-1, 3), np.repeat(elements[slot], 8), index, mesh)
            inside = inside.reshape(-1, 8)
            mixed = inside.any(axis=1) & ~inside.all(axis=1)
            if split_rule == "surface":
                mixed |= _touched(tree, elements, slot, lo, size, index, mesh)
            elif split_rule != "corners":
                raise ValueError(f"unknown split rule {split_rule!r}")
        else:
            mixed = np.zeros(slot.size, dtype=bool)
        leaf_cells = ~mixed
        if leaf_cells.any():
            s, l, d = slot[leaf_cells], lo[leaf_cells], size[leaf_cells]
            xi = l[:, None, :] + 0.5 * (gp[None] + 1.0) * d[:, None, None]
            w = gw[None] * (0.5 * d[:, None]) ** 3
            pts = phys_lo[s][:, None, :] + 0.5 * (xi + 1.0) * h[s][:, None, None]
            inside, _ = classify_in_leaves(pts.reshape(-1, 3), np.repeat(elements[s], gp.shape[0]), index, mesh)
            keep = ~inside
            ss = np.repeat(s, gp.shape[0])
            out_slot.append(ss[keep])
            out_xi.append(xi.reshape(-1, 3)[keep])
            out_w.append(w.ravel()[keep])
            np.add.at(disc, ss[inside], w.ravel()[inside])
        if mixed.any():
            s, l, d = slot[mixed], lo[mixed], size[mixed]
            split_level[s] = np.maximum(split_level[s], depth[mixed] + 1)
            slot = np.repeat(s, 8)
            lo = (l[:, None, :] + _CORNERS[None] * 0.5 * d[:, None, None]).reshape(-1, 3)
            depth = np.repeat(depth[mixed] + 1, 8)
        else:
            slot = slot[:0]
    ss = np.concatenate(out_slot) if out_slot else np.zeros(0, np.int64)
    xi = np.concatenate(out_xi) if out_xi else np.zeros((0, 3))
    w = np.concatenate(out_w) if out_w else np.zeros(0)
    order = np.lexsort((xi[:, 0], xi[:, 1], xi[:, 2], ss))
    ptr = np.zeros(elements.size + 1, np.int64)
    np.cumsum(np.bincount(ss, minlength=elements.size), out=ptr[1:])
    return ptr, xi[order], w[order], disc, split_level


def assign_surface_points(tree, points):
    """Leaf for each point; points on shared faces go to the SFC-lowest leaf."""
    f = (np.asarray(points, float) - tree.box.lo) / tree.cell
    base = np.floor(f).astype(np.int64)
    on_plane = f == base
    best = np.full(f.shape[0], np.iinfo(np.int64).max)
    for s in product((0, 1), repeat=3):
        cells = base - on_plane * np.array(s)
        leaf = tree.locate_cells(cells)
        ok = leaf >= 0
        best[ok] = np.minimum(best[ok], leaf[ok])
    best[best == np.iinfo(np.int64).max] = -1
    return best


def _surface_plan(tree, elements, mesh, rule):
    bary, bw = triangle_rule(rule)
    a, b, c = mesh.corners
    pts = (bary[None, :, 0, None] * a[:, None] + bary[None, :, 1, None] * b[:, None]
           + bary[None, :, 2, None] * c[:, None]).reshape(-1, 3)
    w = (mesh.areas[:, None] * bw[None]).ravel()
    tri = np.repeat(np.arange(mesh.n_triangles), bw.size)
    leaf = assign_surface_points(tree, pts)
    slot = np.searchsorted(elements, leaf)
    ok = (leaf >= 0) & (slot < elements.size)
    ok[ok] = elements[slot[ok]] == leaf[ok]
    if not ok.all():
        log.warning("%d surface point(s) fell outside the intercepted band", int((~ok).sum()))
    order = np.argsort(slot[ok], kind="stable")
    keep = np.flatnonzero(ok)[order]
    ptr = np.zeros(elements.size + 1, np.int64)
    np.cumsum(np.bincount(slot[keep], minlength=elements.size), out=ptr[1:])
    return ptr, pts[keep], w[keep], mesh.normals[tri[keep]], tri[keep]


def build_plans(tree, markers, index, mesh, max_split=2, ngp=2, surface_rule="7pt",
                split_rule="surface"):
    """Quadrature for every Intercepted leaf.

    A sub-cell is split further while ``depth < max_split`` and either its
    corners disagree or (``split_rule="surface"``) a triangle touches it.
    """
    elements = np.flatnonzero(markers == Marker.INTERCEPTED)
    vptr, vxi, vw, disc, split = _volume_plan(tree, elements, index, mesh, max_split, ngp, split_rule)
    sptr, sx, sw, sn, st = _surface_plan(tree, elements, mesh, surface_rule)
    return QuadraturePlan(elements, vptr, vxi, vw, disc, split, sptr, sx, sw, sn, st, ngp)


def adaptive_quadrature(tree, element, index, mesh, max_split=2, ngp=2, split_rule="surface"):
    """Retained reference points and weights of one element, plus discarded weight."""
    elements = np.array([element], dtype=np.int64)
    ptr, xi, w, disc, split = _volume_plan(tree, elements, index, mesh, max_split, ngp, split_rule)
    return xi, w, float(disc[0]), int(split[0])


def surface_quadrature(tree, element, mesh, rule="7pt"):
    """Surface points (physical), area weights and normals owned by one element."""
    elements = np.array([element], dtype=np.int64)
    ptr, x, w, n, _ = _surface_plan(tree, elements, mesh, rule)
    return x, w, n


def fluid_volume(tree, markers, plan):
    """Volume of the fluid region implied by markers and retained weights."""
    out = tree.volumes[markers == Marker.OUT].sum()
    jac = tree.volumes[plan.elements] / 8.0
    per = np.bincount(np.repeat(np.arange(plan.elements.size), plan.n_volume),
                      weights=plan.vol_w, minlength=plan.elements.size)
    return float(out + (per * jac).sum())
