"""Per-element hanging-node corrections.

Each hanging slot of a fine element is re-targeted at a node of the
element's parent octant and its row of ``M_e`` holds the parent basis
evaluated at the slot position. Slot values are then ``M_e @ u[D_e]`` where
``D_e`` lists the re-targeted nodes.
"""
from dataclasses import dataclass

import numpy as np

from ..octree import lagrange_1d, slot_offsets


def node_lookup(nodemap, tree):
    """Return ``find(lattice) -> node ids`` (-1 where no node exists)."""
    n = (1 << tree.max_level) * nodemap.bf + 1
    keys = _keys(nodemap.lattice, n)
    order = np.argsort(keys)
    sk = keys[order]

    def find(lattice):
        k = _keys(np.asarray(lattice, dtype=np.int64), n)
        pos = np.clip(np.searchsorted(sk, k), 0, sk.size - 1)
        return np.where(sk[pos] == k, order[pos], -1)

    return find


def _keys(lat, n):
    return lat[..., 0] + n * (lat[..., 1] + n * lat[..., 2])


@dataclass
class HangingCorrections:
    """``elements`` lists leaves with at least one hanging slot.

    ``matrices[k]`` is ``M_e`` and ``dofs[k]`` is ``D_e`` for ``elements[k]``;
    every other leaf uses the identity and its own connectivity.
    """
    elements: np.ndarray
    matrices: np.ndarray
    dofs: np.ndarray

    def matrix(self, element, n):
        k = np.searchsorted(self.elements, element)
        if k < self.elements.size and self.elements[k] == element:
            return self.matrices[k]
        return np.eye(n)

    def element_dofs(self, nodemap):
        """Connectivity with hanging slots replaced by their targets."""
        d = nodemap.conn.copy()
        d[self.elements] = self.dofs
        return d


def compute_hanging_corrections(tree, nodemap, elements=None):
    bf = nodemap.bf
    offs = slot_offsets(bf)
    hang = nodemap.hanging
    if elements is None:
        elements = np.flatnonzero(hang.any(axis=1))
    elements = np.asarray(elements, dtype=np.int64)
    n = offs.shape[0]
    E = elements.size
    mats = np.broadcast_to(np.eye(n), (E, n, n)).copy()
    dofs = nodemap.conn[elements].copy()
    if E == 0:
        return HangingCorrections(elements, mats, dofs)
    if np.any(tree.levels[elements] == 0) and hang[elements].any():
        raise ValueError("the root octant cannot carry hanging nodes")

    size = tree.sizes[elements]
    child = (tree.anchors[elements] // size[:, None]) % 2           # (E, 3)
    parent = tree.anchors[elements] - child * size[:, None]
    twice = child[:, None, :] * bf + offs[None]                     # 2 * parent-unit position
    half = twice % 2 == 1
    extra = np.where(child == 0, bf, 0)[:, None, :]
    pidx = np.where(half, extra, twice // 2)                        # parent slot index per direction
    # pidx is a permutation per direction, so parent slot -> fine slot is well defined
    pslot = pidx[..., 0] + (bf + 1) * (pidx[..., 1] + (bf + 1) * pidx[..., 2])
    inv = np.empty_like(pslot)
    np.put_along_axis(inv, pslot, np.arange(n)[None].repeat(E, 0), axis=1)

    e_loc, s_loc = np.nonzero(hang[elements])
    xi = twice[e_loc, s_loc] / bf - 1.0                             # parent reference coords
    L = [lagrange_1d(bf, xi[:, k]) for k in range(3)]
    w = (L[0][:, None, None, :] * L[1][:, None, :, None] * L[2][:, :, None, None]).reshape(e_loc.size, -1)
    rows = np.zeros((e_loc.size, n))
    np.put_along_axis(rows, inv[e_loc], w, axis=1)
    mats[e_loc, s_loc] = rows

    find = node_lookup(nodemap, tree)
    plat = bf * parent[e_loc] + pidx[e_loc, s_loc] * (2 * size[e_loc])[:, None]
    target = find(plat)
    if np.any(target < 0):
        raise ValueError("parent node of a hanging slot is missing from the node map")
    dofs[e_loc, s_loc] = target
    return HangingCorrections(elements, mats, dofs)
