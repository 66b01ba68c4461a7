"""Linear octrees on an integer lattice.

Octants are stored as ``(anchor, level)`` pairs where the anchor is the lower
corner in units of the finest cell (``2**-max_level`` of the root edge). All
leaf-set operations are vectorised over numpy arrays.
"""
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp

from .geometry import Aabb, triangles_boxes_overlap

log = logging.getLogger(__name__)

MAX_LATTICE_LEVEL = 20

# 26 neighbour directions, face directions first.
DIRECTIONS = np.array(sorted((d for d in product((-1, 0, 1), repeat=3) if any(d)),
                             key=lambda d: (sum(map(abs, d)), d)), dtype=np.int64)


class OctreeError(ValueError):
    pass


# --------------------------------------------------------------------------
# Space-filling curves

def morton_key(coords, bits):
    """Interleave the bits of integer ``coords`` (N, 3); x is the lowest bit."""
    coords = np.asarray(coords, dtype=np.int64)
    key = np.zeros(coords.shape[0], dtype=np.int64)
    for b in range(bits):
        for k in range(3):
            key |= ((coords[:, k] >> b) & 1) << (3 * b + k)
    return key


def hilbert_key(coords, bits):
    """Hilbert index of integer ``coords`` (N, 3) on a ``2**bits`` grid.

    Transpose-form Hilbert encoding followed by bit interleaving; consecutive
    indices are face-adjacent cells.
    """
    x = [np.asarray(coords, dtype=np.int64)[:, k].copy() for k in range(3)]
    if bits == 0:
        return np.zeros(len(x[0]), dtype=np.int64)
    m = 1 << (bits - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(3):
            hi = (x[i] & q) != 0
            x[0] = np.where(hi, x[0] ^ p, x[0])
            t = np.where(hi, 0, (x[0] ^ x[i]) & p)
            x[0] ^= t
            x[i] ^= t
        q >>= 1
    for i in range(1, 3):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    q = m
    while q > 1:
        t = np.where((x[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    for i in range(3):
        x[i] ^= t
    key = np.zeros_like(x[0])
    for b in range(bits - 1, -1, -1):
        for i in range(3):
            key = (key << 1) | ((x[i] >> b) & 1)
    return key


# --------------------------------------------------------------------------
# Data types

@dataclass
class RefinementSpec:
    """Refinement levels requested over the root cube ``box``.

    ``regions`` holds ``(Aabb, level)`` pairs applied to every octant whose
    interior overlaps the region. With a ``surface`` mesh, octants within
    ``surface_distance`` (max-norm) of any triangle get ``surface_level``.
    """
    box: Aabb
    base_level: int
    regions: list = field(default_factory=list)
    surface: object = None
    surface_level: int = 0
    surface_distance: float = 0.0
    max_level: int = None
    curve: str = "hilbert"

    def __post_init__(self):
        requested = [self.base_level] + [lvl for _, lvl in self.regions]
        if self.surface is not None:
            requested.append(self.surface_level)
        if self.max_level is None:
            self.max_level = max(requested)
        if self.max_level > MAX_LATTICE_LEVEL:
            raise OctreeError(f"max_level {self.max_level} exceeds lattice depth {MAX_LATTICE_LEVEL}")
        if max(requested) > self.max_level or min(requested) < 0:
            raise OctreeError(f"refinement levels {requested} outside [0, {self.max_level}]")
        ext = self.box.hi - self.box.lo
        if not np.allclose(ext, ext[0], rtol=1e-12):
            raise OctreeError("octree root box must be a cube")


class _Locator:
    """Point-to-leaf lookup through per-level sorted keys."""

    def __init__(self, anchors, levels, max_level):
        self.max_level = max_level
        self.n = 1 << max_level
        self.tables = []
        for lvl in np.unique(levels):
            idx = np.flatnonzero(levels == lvl)
            keys = self._key(anchors[idx])
            order = np.argsort(keys)
            self.tables.append((int(lvl), keys[order], idx[order]))

    def _key(self, a):
        n = self.n
        return a[:, 0] + n * (a[:, 1] + n * a[:, 2])

    def __call__(self, cells):
        """Leaf index containing each finest-level cell; -1 outside the root."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        out = np.full(cells.shape[0], -1, dtype=np.int64)
        inside = np.all((cells >= 0) & (cells < self.n), axis=1)
        for lvl, keys, idx in self.tables:
            shift = self.max_level - lvl
            aligned = (cells >> shift) << shift
            k = self._key(aligned)
            pos = np.clip(np.searchsorted(keys, k), 0, len(keys) - 1)
            hit = inside & (keys[pos] == k) & (out < 0)
            out[hit] = idx[pos[hit]]
        return out


@dataclass
class Octree:
    anchors: np.ndarray
    levels: np.ndarray
    max_level: int
    box: Aabb
    curve: str = "hilbert"

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(-1, 3)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        self._locator = None

    # geometry -------------------------------------------------------------
    @property
    def n_leaves(self):
        return int(self.levels.size)

    def __len__(self):
        return self.n_leaves

    @property
    def sizes(self):
        """Leaf edge length in lattice units."""
        return np.left_shift(1, self.max_level - self.levels)

    @property
    def cell(self):
        """Physical edge length of one lattice unit."""
        return float(self.box.hi[0] - self.box.lo[0]) / (1 << self.max_level)

    @property
    def h(self):
        return self.sizes * self.cell

    @property
    def lower(self):
        return self.box.lo + self.anchors * self.cell

    @property
    def upper(self):
        return self.box.lo + (self.anchors + self.sizes[:, None]) * self.cell

    @property
    def centers(self):
        return self.box.lo + (self.anchors + 0.5 * self.sizes[:, None]) * self.cell

    @property
    def volumes(self):
        return self.h ** 3

    def to_lattice(self, points):
        return np.floor((np.asarray(points, float) - self.box.lo) / self.cell).astype(np.int64)

    # queries --------------------------------------------------------------
    def locate_cells(self, cells):
        if self._locator is None:
            self._locator = _Locator(self.anchors, self.levels, self.max_level)
        return self._locator(cells)

    def locate(self, points):
        """Leaf containing each physical point (half-open cells, -1 outside)."""
        cells = self.to_lattice(points)
        n = 1 << self.max_level
        pts = np.asarray(points, float).reshape(-1, 3)
        on_top = pts >= self.box.hi
        cells = np.where(on_top & (pts <= self.box.hi), n - 1, cells)
        return self.locate_cells(cells)

    def keys(self):
        return sfc_key(self.anchors, self.levels, self.max_level, self.curve)

    def sorted(self):
        order = np.argsort(self.keys(), kind="stable")
        return Octree(self.anchors[order], self.levels[order], self.max_level, self.box, self.curve)

    def neighbor_probes(self, idx):
        """Leaves adjacent to ``idx`` found through finest-neighbour probes.

        Exact for 2:1 balanced trees. Returns CSR ``(ptr, nbrs)``.
        """
        idx = np.asarray(idx, dtype=np.int64)
        lv = self.levels[idx]
        fine = np.minimum(lv + 1, self.max_level)
        ptr = [0]
        out = []
        for step in (1, 2):
            sel = np.flatnonzero((np.left_shift(1, self.max_level - fine) * step) == self.sizes[idx])
            if sel.size == 0:
                continue
            rng = np.arange(-1, step + 1)
            offs = np.array([o for o in product(rng, repeat=3)
                             if any(c < 0 or c >= step for c in o)], dtype=np.int64)
            sub = np.left_shift(1, self.max_level - fine[sel])
            probes = self.anchors[idx[sel], None, :] + offs[None] * sub[:, None, None]
            hit = self.locate_cells(probes.reshape(-1, 3)).reshape(len(sel), -1)
            out.append((sel, hit))
        per = [None] * idx.size
        for sel, hit in out:
            for s, row in zip(sel, hit):
                per[s] = np.unique(row[row >= 0])
        flat = []
        for s in range(idx.size):
            flat.append(per[s])
            ptr.append(ptr[-1] + per[s].size)
        return np.array(ptr, dtype=np.int64), (np.concatenate(flat) if flat else np.zeros(0, np.int64))


def sfc_key(anchors, levels, max_level, curve="hilbert"):
    """SFC key of each octant: the index of the first finest cell it covers."""
    anchors = np.asarray(anchors, dtype=np.int64)
    if curve == "morton":
        return morton_key(anchors, max_level)
    if curve != "hilbert":
        raise OctreeError(f"unknown curve {curve!r}")
    shift = 3 * (max_level - np.asarray(levels, dtype=np.int64))
    return (hilbert_key(anchors, max_level) >> shift) << shift


def children(anchors, levels, max_level):
    """The eight children of each octant, in Morton child order."""
    half = np.left_shift(1, max_level - levels - 1)
    offs = np.array(list(product((0, 1), repeat=3)))[:, ::-1]
    kids = anchors[:, None, :] + offs[None] * half[:, None, None]
    return kids.reshape(-1, 3), np.repeat(levels + 1, 8)


def neighbors(tree, i):
    """All leaves sharing a face, edge or vertex with leaf ``i`` (any levels)."""
    lo = tree.anchors
    hi = lo + tree.sizes[:, None]
    touch = np.all((lo <= hi[i]) & (hi >= lo[i]), axis=1)
    touch[i] = False
    return np.flatnonzero(touch)


# --------------------------------------------------------------------------
# Construction

def _grid_candidates(mesh, lo, cell, anchors, size, pad):
    """(octant, triangle) pairs whose padded boxes overlap triangle bboxes.

    All octants share the edge length ``size`` (lattice units).
    """
    a, b, c = mesh.corners
    tlo = np.minimum(np.minimum(a, b), c) - pad
    thi = np.maximum(np.maximum(a, b), c) + pad
    s = size * cell
    ilo = np.floor((tlo - lo) / s).astype(np.int64)
    ihi = np.floor((thi - lo) / s).astype(np.int64)
    n = 1 << 21
    span = ihi - ilo + 1
    count = np.prod(span, axis=1)
    tri = np.repeat(np.arange(mesh.n_triangles), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    sx = span[tri, 0]
    sy = span[tri, 1]
    ix = ilo[tri, 0] + local % sx
    iy = ilo[tri, 1] + (local // sx) % sy
    iz = ilo[tri, 2] + local // (sx * sy)
    cell_key = ix * size + n * (iy * size + n * iz * size)
    keys = anchors[:, 0] + n * (anchors[:, 1] + n * anchors[:, 2])
    order = np.argsort(keys)
    pos = np.clip(np.searchsorted(keys[order], cell_key), 0, len(keys) - 1)
    hit = keys[order][pos] == cell_key
    return order[pos[hit]], tri[hit]


def octant_triangle_pairs(mesh, box_lo, cell, anchors, levels, max_level, pad=0.0):
    """Exact (octant, triangle) overlap pairs via grid binning plus SAT.

    ``pad`` grows every octant box by a physical distance before testing.
    """
    oct_ids, tri_ids = [], []
    for lvl in np.unique(levels):
        sel = np.flatnonzero(levels == lvl)
        size = 1 << (max_level - int(lvl))
        o, t = _grid_candidates(mesh, box_lo, cell, anchors[sel], size, pad)
        if o.size == 0:
            continue
        blo = box_lo + anchors[sel[o]] * cell - pad
        bhi = blo + size * cell + 2 * pad
        keep = triangles_boxes_overlap(mesh, t, blo, bhi)
        oct_ids.append(sel[o[keep]])
        tri_ids.append(t[keep])
    if not oct_ids:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    o = np.concatenate(oct_ids)
    t = np.concatenate(tri_ids)
    order = np.lexsort((t, o))
    return o[order], t[order]


def required_levels(spec, anchors, level, max_level):
    """Level demanded by ``spec`` for octants at ``level`` (vectorised)."""
    cell = float(spec.box.hi[0] - spec.box.lo[0]) / (1 << max_level)
    size = 1 << (max_level - level)
    lo = spec.box.lo + anchors * cell
    hi = lo + size * cell
    req = np.full(anchors.shape[0], spec.base_level, dtype=np.int64)
    for region, lvl in spec.regions:
        if lvl <= level:
            continue
        overlap = np.all((lo < region.hi) & (hi > region.lo), axis=1)
        req[overlap] = np.maximum(req[overlap], lvl)
    if spec.surface is not None and spec.surface_level > level:
        o, _ = octant_triangle_pairs(spec.surface, spec.box.lo, cell, anchors,
                                     np.full(anchors.shape[0], level), max_level,
                                     pad=spec.surface_distance)
        req[np.unique(o)] = np.maximum(req[np.unique(o)], spec.surface_level)
    return req


def build(spec):
    """Top-down construction: split every octant below its required level."""
    L = spec.max_level
    anchors = np.zeros((1, 3), dtype=np.int64)
    out_a, out_l = [], []
    for level in range(L + 1):
        if anchors.shape[0] == 0:
            break
        req = required_levels(spec, anchors, level, L)
        split = req > level
        out_a.append(anchors[~split])
        out_l.append(np.full(int((~split).sum()), level, dtype=np.int64))
        if split.any() and level == L:
            raise OctreeError("refinement demanded beyond max_level")
        anchors, _ = children(anchors[split], np.full(int(split.sum()), level), L)
    tree = Octree(np.concatenate(out_a), np.concatenate(out_l), L, spec.box, spec.curve)
    return tree.sorted()


def uniform(box, level, curve="hilbert", max_level=None):
    return build(RefinementSpec(box=box, base_level=level, max_level=max_level, curve=curve))


def _too_coarse_neighbors(tree):
    """Leaves that are more than one level coarser than some adjacent leaf."""
    deep = np.flatnonzero(tree.levels >= 2)
    if deep.size == 0:
        return np.zeros(0, np.int64)
    a = tree.anchors[deep]
    s = tree.sizes[deep]
    marks = []
    for d in DIRECTIONS:
        probe = np.where(d < 0, a - 1, np.where(d > 0, a + s[:, None], a))
        nb = tree.locate_cells(probe)
        ok = nb >= 0
        bad = ok & (tree.levels[np.where(ok, nb, 0)] < tree.levels[deep] - 1)
        marks.append(nb[bad])
    return np.unique(np.concatenate(marks))


def is_balanced(tree):
    return _too_coarse_neighbors(tree).size == 0


def balance_2to1(tree):
    """Refine until face, edge and vertex neighbours differ by at most one level."""
    anchors, levels = tree.anchors, tree.levels
    while True:
        cur = Octree(anchors, levels, tree.max_level, tree.box, tree.curve)
        bad = _too_coarse_neighbors(cur)
        if bad.size == 0:
            return cur.sorted()
        keep = np.ones(levels.size, dtype=bool)
        keep[bad] = False
        ka, kl = children(anchors[bad], levels[bad], tree.max_level)
        anchors = np.concatenate([anchors[keep], ka])
        levels = np.concatenate([levels[keep], kl])


# --------------------------------------------------------------------------
# Serialisation

def dumps(tree):
    lines = ["# imga-octree max_level=%d curve=%s lo=%s hi=%s" % (
        tree.max_level, tree.curve, ",".join(repr(float(x)) for x in tree.box.lo),
        ",".join(repr(float(x)) for x in tree.box.hi))]
    lines += ["%d %d %d %d" % (x, y, z, l) for (x, y, z), l in zip(tree.anchors, tree.levels)]
    return "\n".join(lines) + "\n"


def loads(text):
    head, *rows = text.strip().splitlines()
    meta = dict(tok.split("=", 1) for tok in head.split()[2:])
    lo = [float(x) for x in meta["lo"].split(",")]
    hi = [float(x) for x in meta["hi"].split(",")]
    data = np.array([[int(v) for v in r.split()] for r in rows], dtype=np.int64).reshape(-1, 4)
    return Octree(data[:, :3], data[:, 3], int(meta["max_level"]), Aabb(lo, hi), meta["curve"])


# --------------------------------------------------------------------------
# Continuous Galerkin nodes

def lagrange_1d(order, x):
    """Equispaced Lagrange basis on [-1, 1] at points ``x``; shape (len(x), order+1)."""
    x = np.asarray(x, dtype=float)
    nodes = np.linspace(-1.0, 1.0, order + 1)
    out = np.ones(x.shape + (order + 1,))
    for a in range(order + 1):
        for b in range(order + 1):
            if a != b:
                out[..., a] *= (x - nodes[b]) / (nodes[a] - nodes[b])
    return out


def slot_offsets(bf):
    """Local node offsets, x fastest: slot = i + (bf+1) j + (bf+1)^2 k."""
    r = np.arange(bf + 1)
    k, j, i = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)


@dataclass
class NodeMap:
    """CG node numbering of a balanced octree.

    ``lattice`` holds node positions in units of ``cell / bf``. Hanging nodes
    keep a row in ``lattice`` but no global index; ``constraint`` maps global
    unknowns to every node (identity rows for independent nodes, interpolation
    stencils for hanging ones).
    """
    bf: int
    lattice: np.ndarray
    coords: np.ndarray
    conn: np.ndarray
    hanging_node: np.ndarray
    global_index: np.ndarray
    constraint: sp.csr_matrix

    @property
    def n_global(self):
        return int(self.constraint.shape[1])

    @property
    def n_nodes(self):
        return int(self.lattice.shape[0])

    @property
    def hanging(self):
        return self.hanging_node[self.conn]

    def stencil(self, node):
        row = self.constraint.getrow(node)
        return row.indices, row.data


def enumerate_nodes(tree, bf=1):
    if bf not in (1, 2):
        raise OctreeError("basis order must be 1 or 2")
    if not is_balanced(tree):
        raise OctreeError("enumerate_nodes needs a 2:1 balanced tree")
    if bf == 2 and tree.max_level > MAX_LATTICE_LEVEL - 1:
        raise OctreeError("quadratic nodes need max_level <= 19 for 63-bit node keys")
    offs = slot_offsets(bf)
    size = tree.sizes
    pos = bf * tree.anchors[:, None, :] + offs[None] * size[:, None, None]
    flat = pos.reshape(-1, 3)
    n = (1 << tree.max_level) * bf + 1
    key = flat[:, 0] + n * (flat[:, 1] + n * flat[:, 2])
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    node_of = rank[inv.ravel()]
    lattice = flat[first[order]]
    conn = node_of.reshape(tree.n_leaves, -1)

    # probe the 8 cells around each node; a containing leaf that lacks the node
    # makes it hanging
    signs = np.array(list(product((-1, 1), repeat=3)), dtype=np.int64)
    probe = (2 * lattice[:, None, :] + signs[None]) // (2 * bf)
    leaf = tree.locate_cells(probe.reshape(-1, 3)).reshape(-1, 8)
    valid = leaf >= 0
    lf = np.where(valid, leaf, 0)
    rel = lattice[:, None, :] - bf * tree.anchors[lf]
    is_node = np.all(rel % size[lf][..., None] == 0, axis=2)
    lacks = valid & ~is_node
    hanging_node = lacks.any(axis=1)

    rows, cols, vals = [], [], []
    indep = np.flatnonzero(~hanging_node)
    rows.append(indep)
    cols.append(indep)
    vals.append(np.ones(indep.size))
    hn = np.flatnonzero(hanging_node)
    if hn.size:
        lv = np.where(lacks[hn], tree.levels[lf[hn]], np.iinfo(np.int64).max)
        pick = np.argmin(lv, axis=1)
        coarse = lf[hn, pick]
        xi = 2.0 * (lattice[hn] - bf * tree.anchors[coarse]) / (bf * size[coarse][:, None]) - 1.0
        L = [lagrange_1d(bf, xi[:, k]) for k in range(3)]
        w = (L[0][:, None, None, :] * L[1][:, None, :, None] * L[2][:, :, None, None]).reshape(hn.size, -1)
        keep = np.abs(w) > 1e-14
        r, c = np.nonzero(keep)
        rows.append(hn[r])
        cols.append(conn[coarse[r], c])
        vals.append(w[r, c])
    S = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(lattice.shape[0],) * 2)
    # parents may themselves hang; substitute until only independent nodes remain
    for _ in range(tree.max_level + 1):
        if not S[:, hn].count_nonzero():
            break
        S = (S @ S).tocsr()
    else:
        raise OctreeError("hanging-node constraints did not resolve")
    S.eliminate_zeros()
    global_index = np.full(lattice.shape[0], -1, dtype=np.int64)
    global_index[indep] = np.arange(indep.size)
    C = S[:, indep].tocsr()
    coords = tree.box.lo + lattice * (tree.cell / bf)
    return NodeMap(bf, lattice, coords, conn, hanging_node, global_index, C)
