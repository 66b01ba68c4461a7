"""Geometry side of the weak boundary conditions: the length scale ``h_b``."""
import logging

import numpy as np

from ..classify import csr_gather
from ..geometry import closest_points_on_triangles
from ..octree import slot_offsets
from .vms import H_B_FLOOR

log = logging.getLogger(__name__)


def corner_slots(bf):
    offs = slot_offsets(bf)
    return np.flatnonzero(np.all((offs == 0) | (offs == bf), axis=1))


def compute_h_b(tree, nodemap, elements, node_inside, index, mesh, floor=H_B_FLOOR):
    """Per-leaf ``h_b`` (``h`` wherever it is not defined).

    For each listed element: the largest, over its fluid (outside) corner
    nodes, of the distance to the nearest of the element's own triangles,
    projected on that triangle's normal. Floored at ``floor * h``.
    """
    out = tree.h.copy()
    elements = np.asarray(elements, dtype=np.int64)
    if elements.size == 0:
        return out
    corners = nodemap.conn[elements][:, corner_slots(nodemap.bf)]       # (E, 8)
    fluid = ~node_inside[corners]
    e_loc, c_loc = np.nonzero(fluid)
    ptr, tris = csr_gather(index.ptr, index.tris, elements[e_loc])
    cnt = np.diff(ptr)
    pair = np.repeat(np.arange(e_loc.size), cnt)
    x = nodemap.coords[corners[e_loc, c_loc]]
    a, b, c = (v[tris] for v in mesh.corners)
    cp = closest_points_on_triangles(x[pair], a, b, c)
    d = np.linalg.norm(x[pair] - cp, axis=1)
    proj = np.abs(np.einsum("ij,ij->i", x[pair] - cp, mesh.normals[tris]))
    # nearest triangle per (element, corner)
    order = np.lexsort((d, pair))
    first = np.ones(order.size, dtype=bool)
    first[1:] = pair[order][1:] != pair[order][:-1]
    best = np.full(e_loc.size, np.nan)
    best[pair[order][first]] = proj[order][first]
    hb = np.full(elements.size, -np.inf)
    ok = ~np.isnan(best)
    np.maximum.at(hb, e_loc[ok], best[ok])
    h = tree.h[elements]
    hb = np.where(np.isfinite(hb), hb, h)
    out[elements] = np.maximum(hb, floor * h)
    return out


def check_penalty(c_b, re, h_b, threshold=4.0):
    """Warn when the Nitsche constant is below the coercivity threshold.

    Returns the fraction of elements whose penalty ``c_b / (re h_b)`` is at
    most ``threshold``, for reporting.
    """
    if c_b <= threshold:
        log.warning("Nitsche constant C_b=%g does not exceed %g", c_b, threshold)
    tau = c_b / (re * np.asarray(h_b))
    return float(np.mean(tau <= threshold)) if tau.size else 0.0
