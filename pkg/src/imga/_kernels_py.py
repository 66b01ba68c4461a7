"""Pure numpy implementations of the geometric and assembly hot loops.

These mirror ``imga._kernels`` (Cython) exactly in signature and semantics and
are used whenever the compiled module is unavailable.
"""
import numpy as np

_CHUNK_PAIRS = 1 << 21


def ray_cast(origins, dirs, v0, e1, e2, tol_bary, tol_t):
    """Cast one ray per origin against every triangle.

    Returns ``(crossings, degenerate, on_surface)``. A hit whose barycentric
    coordinates come within ``tol_bary`` of a triangle edge marks the ray
    degenerate; a hit with ``|t| <= tol_t`` marks the origin as on-surface.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    m = origins.shape[0]
    ntri = v0.shape[0]
    crossings = np.zeros(m, dtype=np.int64)
    degenerate = np.zeros(m, dtype=bool)
    on_surface = np.zeros(m, dtype=bool)
    if m == 0 or ntri == 0:
        return crossings, degenerate, on_surface
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    step = max(1, _CHUNK_PAIRS // ntri)
    for s in range(0, m, step):
        o = origins[s:s + step, None, :]
        d = dirs[s:s + step, None, :]
        pvec = np.cross(d, e2[None])
        det = np.einsum("ijk,ijk->ij", pvec, e1[None])
        ok = np.abs(det) > 1e-14 * scale[None]
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0[None]
        u = np.einsum("ijk,ijk->ij", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("ijk,ijk->ij", d, qvec) * inv
        t = np.einsum("ijk,ijk->ij", e2[None], qvec) * inv
        w = 1.0 - u - v
        inside = ok & (u >= -tol_bary) & (u <= 1.0 + tol_bary) & (v >= -tol_bary) & (w >= -tol_bary)
        edge = inside & (np.minimum(np.minimum(u, v), w) < tol_bary)
        ahead = t > tol_t
        crossings[s:s + step] = np.count_nonzero(inside & ~edge & ahead, axis=1)
        degenerate[s:s + step] = np.any(edge & ahead, axis=1)
        on_surface[s:s + step] = np.any(inside & (np.abs(t) <= tol_t), axis=1)
    return crossings, degenerate, on_surface


def ray_cast_binned(origins, dirs, ray_cell, cell_ptr, cell_tris, v0, e1, e2, tol_bary, tol_t):
    """Like :func:`ray_cast` but ray ``i`` only meets the triangles of bin ``ray_cell[i]``."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    m = origins.shape[0]
    crossings = np.zeros(m, dtype=np.int64)
    degenerate = np.zeros(m, dtype=bool)
    on_surface = np.zeros(m, dtype=bool)
    rays = np.flatnonzero(ray_cell >= 0)
    start = cell_ptr[ray_cell[rays]]
    count = cell_ptr[ray_cell[rays] + 1] - start
    total = np.cumsum(count)
    bounds = np.searchsorted(total, np.arange(0, total[-1] if total.size else 0, _CHUNK_PAIRS),
                             side="right")
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    for s, e in zip(bounds, np.r_[bounds[1:], rays.size]):
        r = rays[s:e]
        c = count[s:e]
        off = np.cumsum(c) - c
        owner = np.repeat(r, c)
        tri = cell_tris[np.repeat(start[s:e] - off, c) + np.arange(c.sum())]
        o, d = origins[owner], dirs[owner]
        pvec = np.cross(d, e2[tri])
        det = np.einsum("ij,ij->i", pvec, e1[tri])
        ok = np.abs(det) > 1e-14 * scale[tri]
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0[tri]
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[tri])
        v = np.einsum("ij,ij->i", d, qvec) * inv
        t = np.einsum("ij,ij->i", e2[tri], qvec) * inv
        w = 1.0 - u - v
        inside = ok & (u >= -tol_bary) & (u <= 1.0 + tol_bary) & (v >= -tol_bary) & (w >= -tol_bary)
        edge = inside & (np.minimum(np.minimum(u, v), w) < tol_bary)
        ahead = t > tol_t
        crossings += np.bincount(owner[inside & ~edge & ahead], minlength=m)
        degenerate[owner[edge & ahead]] = True
        on_surface[owner[inside & (np.abs(t) <= tol_t)]] = True
    return crossings, degenerate, on_surface


def normal_votes(points, ptr, tri_ids, centroids, normals):
    """Count, per point, the window triangles with ``(p - c) . n <= 0``."""
    counts = np.diff(ptr)
    owner = np.repeat(np.arange(points.shape[0]), counts)
    d = points[owner] - centroids[tri_ids]
    behind = np.einsum("ij,ij->i", d, normals[tri_ids]) <= 0.0
    return np.bincount(owner[behind], minlength=points.shape[0]).astype(np.int64)


def tri_box_overlap(a, b, c, center, half):
    """Closed triangle / axis-aligned box overlap for K pairs (13-axis SAT)."""
    a = a - center
    b = b - center
    c = c - center
    hit = np.ones(a.shape[0], dtype=bool)
    for k in range(3):
        lo = np.minimum(np.minimum(a[:, k], b[:, k]), c[:, k])
        hi = np.maximum(np.maximum(a[:, k], b[:, k]), c[:, k])
        hit &= (lo <= half[:, k]) & (hi >= -half[:, k])
    edges = (b - a, c - b, a - c)
    n = np.cross(edges[0], -edges[2])
    r = np.einsum("ij,ij->i", np.abs(n), half)
    s = np.einsum("ij,ij->i", n, a)
    hit &= np.abs(s) <= r
    for k in range(3):
        unit = np.zeros(3)
        unit[k] = 1.0
        for e in edges:
            ax = np.cross(unit[None], e)
            pa = np.einsum("ij,ij->i", ax, a)
            pb = np.einsum("ij,ij->i", ax, b)
            pc = np.einsum("ij,ij->i", ax, c)
            rad = np.einsum("ij,ij->i", np.abs(ax), half)
            lo = np.minimum(np.minimum(pa, pb), pc)
            hi = np.maximum(np.maximum(pa, pb), pc)
            hit &= (lo <= rad) & (hi >= -rad)
    return hit


def gauss_loop_matrix(op1, op2, gpw):
    """Accumulate ``sum_g gpw[g] * op1[:, g] op2[:, g]^T`` one point at a time."""
    n1 = op1.shape[0]
    n2 = op2.shape[0]
    out = np.zeros((n1, n2))
    for g in range(gpw.shape[0]):
        out += gpw[g] * np.outer(op1[:, g], op2[:, g])
    return out


def gauss_loop_batch(op1, op2, gpw):
    """:func:`gauss_loop_matrix` for a batch of coefficient rows ``gpw`` (E, q)."""
    out = np.zeros((gpw.shape[0], op1.shape[0], op2.shape[0]))
    for g in range(op1.shape[1]):
        out += gpw[:, g, None, None] * np.outer(op1[:, g], op2[:, g])[None]
    return out
