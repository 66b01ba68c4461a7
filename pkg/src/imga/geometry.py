"""Triangle surface meshes and the geometric predicates used for in/out tests.

Conventions: triangle normals point out of the immersed body (into the fluid);
a point is ``IN`` when it lies inside the body.
"""
import enum
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

BARY_TOL = 1e-10
MAX_RECASTS = 16
RAY_SEED = 20210611


class InOut(enum.IntEnum):
    IN = 0
    OUT = 1
    CONFLICT = 2


class StlParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ClassificationError(RuntimeError):
    """Every cast ray grazed an edge or vertex."""


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi):
            raise ValueError(f"invalid box {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self):
        return 0.5 * (self.hi - self.lo)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.hi - self.lo))


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = field(init=False)
    centroids: np.ndarray = field(init=False)
    areas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        a, b, c = self.corners
        cr = np.cross(b - a, c - a)
        norm = np.linalg.norm(cr, axis=1)
        if np.any(norm == 0.0):
            raise ValueError("zero-area triangle in surface mesh")
        self.normals = cr / norm[:, None]
        self.areas = 0.5 * norm
        self.centroids = (a + b + c) / 3.0
        self._edges = (b - a, c - a)
        self._ray_grid = None

    def ray_grid(self):
        """Triangles binned by their (y, z) extent, for rays cast along +x.

        Returns ``(lo, step, nb, cell_ptr, cell_tris)``; built once and cached.
        """
        if self._ray_grid is None:
            a, b, c = self.corners
            yz = np.stack([a[:, 1:], b[:, 1:], c[:, 1:]])
            pad = 1e-8 * (self.bbox.diagonal + 1.0)
            tlo, thi = yz.min(axis=0) - pad, yz.max(axis=0) + pad
            lo = tlo.min(axis=0)
            nb = int(np.clip(np.sqrt(self.n_triangles), 1, 1024))
            step = np.maximum((thi.max(axis=0) - lo) / nb, 1e-300)
            ilo = np.clip(((tlo - lo) // step).astype(np.int64), 0, nb - 1)
            ihi = np.clip(((thi - lo) // step).astype(np.int64), 0, nb - 1)
            span = ihi - ilo + 1
            cnt = span[:, 0] * span[:, 1]
            tri = np.repeat(np.arange(self.n_triangles), cnt)
            local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            cy = ilo[tri, 0] + local // span[tri, 1]
            cz = ilo[tri, 1] + local % span[tri, 1]
            cell = cy * nb + cz
            order = np.argsort(cell, kind="stable")
            ptr = np.zeros(nb * nb + 1, np.int64)
            np.cumsum(np.bincount(cell, minlength=nb * nb), out=ptr[1:])
            self._ray_grid = (lo, step, nb, ptr, tri[order])
        return self._ray_grid

    @property
    def corners(self):
        v = self.vertices[self.triangles]
        return v[:, 0], v[:, 1], v[:, 2]

    @property
    def n_triangles(self):
        return int(self.triangles.shape[0])

    @property
    def bbox(self):
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    @property
    def area(self):
        return float(self.areas.sum())

    def volume(self):
        """Enclosed volume via the divergence theorem (watertight meshes)."""
        a, b, c = self.corners
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def is_watertight(self):
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, rotation=None, translation=None, scale=1.0):
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return SurfaceMesh(v, self.triangles.copy())


# --------------------------------------------------------------------------
# STL I/O

_BINARY_RECORD = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _is_ascii(data):
    if not data[:5].lower() == b"solid":
        return False
    if len(data) >= 84:
        (n,) = struct.unpack_from("<I", data, 80)
        if 84 + 50 * n == len(data):
            return False
    return b"facet" in data[:1024] or b"endsolid" in data


def _parse_binary(data):
    if len(data) < 84:
        raise StlParseError("truncated binary STL header", len(data))
    (n,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * n
    if len(data) < need:
        complete = (len(data) - 84) // 50
        raise StlParseError(f"truncated binary STL: record {complete} of {n} incomplete",
                            84 + 50 * complete)
    rec = np.frombuffer(data, dtype=_BINARY_RECORD, count=n, offset=84)
    return rec["v"].astype(float), rec["normal"].astype(float)


def _parse_ascii(data):
    text = data.decode("ascii", errors="replace")
    tris, normals = [], []
    facet_re = re.compile(
        r"facet\s+normal\s+(%s)\s+(%s)\s+(%s)\s+outer\s+loop\s+" % (_FLOAT, _FLOAT, _FLOAT)
        + r"".join(r"vertex\s+(%s)\s+(%s)\s+(%s)\s+" % (_FLOAT, _FLOAT, _FLOAT) for _ in range(3))
        + r"endloop\s+endfacet",
        re.IGNORECASE,
    )
    pos = text.find("\n") + 1 if text.lower().startswith("solid") else 0
    while True:
        m = re.compile(r"\s*").match(text, pos)
        pos = m.end()
        if text.startswith("endsolid", pos) or pos >= len(text):
            break
        m = facet_re.match(text, pos)
        if m is None:
            raise StlParseError("malformed ASCII STL facet", len(text[:pos].encode()))
        vals = [float(x) for x in m.groups()]
        normals.append(vals[:3])
        tris.append(np.reshape(vals[3:], (3, 3)))
        pos = m.end()
    if not tris:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.array(tris), np.array(normals)


def weld(corners, tol):
    """Merge coincident vertices of a triangle soup on a ``tol`` grid."""
    pts = corners.reshape(-1, 3)
    keys = np.round(pts / tol).astype(np.int64) if tol > 0 else pts
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    vertices = pts[first[order]]
    return vertices, rank[inverse.ravel()].reshape(-1, 3)


def load_stl(path, weld_tol=None):
    """Read an ASCII or binary STL file into a welded :class:`SurfaceMesh`.

    Normals are recomputed from the vertex winding. Zero-area triangles are
    dropped (with a logged count); a non-watertight result is only a warning.
    """
    data = Path(path).read_bytes()
    corners, stored = _parse_ascii(data) if _is_ascii(data) else _parse_binary(data)
    if corners.shape[0] == 0:
        raise StlParseError("STL file contains no facets", len(data))
    diag = float(np.linalg.norm(corners.reshape(-1, 3).max(0) - corners.reshape(-1, 3).min(0)))
    tol = weld_tol if weld_tol is not None else 1e-9 * diag
    vertices, tris = weld(corners, tol)
    degenerate = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    v = vertices[tris]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    degenerate |= area2 <= 1e-14 * max(diag, 1e-300) ** 2
    if degenerate.any():
        log.warning("dropped %d zero-area triangles from %s", int(degenerate.sum()), path)
    keep = ~degenerate
    mesh = SurfaceMesh(vertices, tris[keep])
    stored = stored[keep]
    snorm = np.linalg.norm(stored, axis=1)
    valid = snorm > 0
    cosang = np.einsum("ij,ij->i", stored[valid] / snorm[valid, None], mesh.normals[valid])
    bad = int(np.count_nonzero(cosang < np.cos(1e-6)))
    if bad:
        log.info("%d stored STL normals disagree with vertex winding; using winding", bad)
    if not mesh.is_watertight():
        log.warning("surface mesh from %s is not watertight", path)
    return mesh


def save_stl(mesh, path, binary=True):
    a, b, c = mesh.corners
    if binary:
        rec = np.zeros(mesh.n_triangles, dtype=_BINARY_RECORD)
        rec["normal"] = mesh.normals
        rec["v"] = np.stack([a, b, c], axis=1)
        with open(path, "wb") as fh:
            fh.write(b"imga binary stl".ljust(80, b" "))
            fh.write(struct.pack("<I", mesh.n_triangles))
            fh.write(rec.tobytes())
        return
    lines = ["solid imga"]
    for n, p, q, r in zip(mesh.normals, a, b, c):
        lines.append("  facet normal %.17g %.17g %.17g" % tuple(n))
        lines.append("    outer loop")
        for v in (p, q, r):
            lines.append("      vertex %.17g %.17g %.17g" % tuple(v))
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append("endsolid imga")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Test geometries

def icosphere(level=4, radius=0.5, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron; ``level=4`` gives 2562 vertices, 5120 triangles."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = v[i] + v[j]
                v.append(p / np.linalg.norm(p))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return SurfaceMesh(np.array(v) * radius + np.asarray(center, float), np.array(faces))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    """Axis-aligned box as 12 outward-oriented triangles."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    quads = [(0, 2, 6, 4), (1, 5, 7, 3), (0, 4, 5, 1), (2, 3, 7, 6), (0, 1, 3, 2), (4, 6, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, c, b), (a, d, c)]
    return SurfaceMesh(corners, np.array(tris))


def l_bracket(size=1.0, thickness=0.5, origin=(0.0, 0.0, 0.0)):
    """Extruded L profile with one concave (re-entrant) edge."""
    s = size
    poly = np.array([(0, 0), (2 * s, 0), (2 * s, s), (s, s), (s, 2 * s), (0, 2 * s)], float)
    n = len(poly)
    verts = np.vstack([np.c_[poly, np.zeros(n)], np.c_[poly, np.full(n, thickness)]])
    verts += np.asarray(origin, float)
    fan = [(3, 4, 5), (3, 5, 0), (3, 0, 1), (3, 1, 2)]
    tris = [(a, c, b) for a, b, c in fan] + [(a + n, b + n, c + n) for a, b, c in fan]
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, j + n), (i, j + n, i + n)]
    return SurfaceMesh(verts, np.array(tris))


# --------------------------------------------------------------------------
# Predicates

def _sat_margin(tri, center, axes, half):
    """Largest normalised separation over the 13 SAT axes (<= 0 means overlap)."""
    p = (np.asarray(tri, float) - center) @ axes.T
    cand = [np.eye(3)[k] for k in range(3)]
    e = [p[1] - p[0], p[2] - p[1], p[0] - p[2]]
    cand.append(np.cross(e[0], e[1]))
    cand += [np.cross(np.eye(3)[k], ed) for k in range(3) for ed in e]
    best = -np.inf
    for ax in cand:
        nrm = np.linalg.norm(ax)
        if nrm < 1e-300:
            continue
        ax = ax / nrm
        proj = p @ ax
        rad = np.abs(ax) @ half
        best = max(best, proj.min() - rad, -rad - proj.max())
    return float(best)


def triangle_box_overlap(tri, box):
    """True iff the closed triangle ``tri`` (3x3) and the closed ``box`` meet."""
    tri = np.asarray(tri, float)
    hit = kernels.tri_box_overlap(tri[None, 0], tri[None, 1], tri[None, 2],
                                  box.center[None], box.half[None])
    return bool(hit[0])


def triangle_obb_overlap(tri, center, axes, half, tol=0.0):
    """Closed triangle / oriented box overlap; rows of ``axes`` are box axes."""
    return _sat_margin(tri, np.asarray(center, float), np.asarray(axes, float),
                       np.asarray(half, float)) <= tol


def triangles_boxes_overlap(mesh, tri_ids, box_lo, box_hi):
    """Vectorised SAT over (triangle, box) pairs."""
    a, b, c = (x[tri_ids] for x in mesh.corners)
    return kernels.tri_box_overlap(a, b, c, 0.5 * (box_lo + box_hi), 0.5 * (box_hi - box_lo))


def _ray_directions():
    rng = np.random.default_rng(RAY_SEED)
    dirs = [np.array([1.0, 0.0, 0.0])]
    for _ in range(MAX_RECASTS - 1):
        d = rng.normal(size=3)
        dirs.append(d / np.linalg.norm(d))
    return np.array(dirs)


RAY_DIRECTIONS = _ray_directions()


def ray_trace_inside_many(points, mesh):
    """Crossing-parity classification of many points; returns a bool array (True = In)."""
    pts = np.atleast_2d(np.asarray(points, float))
    a, _, _ = mesh.corners
    e1, e2 = mesh._edges
    tol_t = 1e-12 * mesh.bbox.diagonal
    result = np.zeros(len(pts), dtype=bool)
    todo = np.arange(len(pts))
    for k, d in enumerate(RAY_DIRECTIONS):
        dirs = np.repeat(d[None], todo.size, axis=0)
        if k == 0:
            lo, step, nb, cptr, ctris = mesh.ray_grid()
            ij = np.floor((pts[todo, 1:] - lo) / step).astype(np.int64)
            ok = np.all((ij >= 0) & (ij < nb), axis=1)
            cell = np.where(ok, ij[:, 0] * nb + ij[:, 1], -1)
            cross, degen, on_surf = kernels.ray_cast_binned(pts[todo], dirs, cell, cptr, ctris,
                                                            a, e1, e2, BARY_TOL, tol_t)
        else:
            cross, degen, on_surf = kernels.ray_cast(pts[todo], dirs, a, e1, e2, BARY_TOL, tol_t)
        done = on_surf | ~degen
        result[todo[done]] = on_surf[done] | (cross[done] % 2 == 1)
        todo = todo[~done]
        if todo.size == 0:
            return result
    raise ClassificationError(
        f"{todo.size} point(s) hit edges or vertices on {MAX_RECASTS} consecutive casts")


def ray_trace_inside(point, mesh):
    """Classify one point by ray-crossing parity (points on the surface are In)."""
    inside = ray_trace_inside_many(np.asarray(point, float)[None], mesh)[0]
    return InOut.IN if inside else InOut.OUT


def normal_votes(points, ptr, tri_ids, mesh):
    """Per-point count of window triangles that place the point behind them."""
    return kernels.normal_votes(np.ascontiguousarray(points, float), np.asarray(ptr, np.int64),
                                np.asarray(tri_ids, np.int64), mesh.centroids, mesh.normals)


def normal_in_out(point, tris, mesh):
    """Unanimous-vote in/out test against the triangle window ``tris``."""
    tris = np.asarray(tris, np.int64)
    if tris.size == 0:
        raise ValueError("normal_in_out needs at least one triangle")
    behind = normal_votes(np.asarray(point, float)[None], [0, tris.size], tris, mesh)[0]
    if behind == tris.size:
        return InOut.IN
    if behind == 0:
        return InOut.OUT
    return InOut.CONFLICT


def classify_points(points, ptr, tri_ids, mesh):
    """Normal test with ray-tracing fallback for conflicting or windowless points.

    ``ptr``/``tri_ids`` give each point's triangle window in CSR form. Returns
    ``(inside, fallback)`` boolean arrays.
    """
    points = np.atleast_2d(np.asarray(points, float))
    ptr = np.asarray(ptr, np.int64)
    total = np.diff(ptr)
    behind = normal_votes(points, ptr, tri_ids, mesh)
    inside = (behind == total) & (total > 0)
    fallback = (total == 0) | ((behind != total) & (behind != 0))
    if fallback.any():
        inside[fallback] = ray_trace_inside_many(points[fallback], mesh)
    return inside, fallback


def classify_point(point, tris, mesh):
    """Returns ``(InOut.IN | InOut.OUT, fallback_fired)``."""
    tris = np.asarray(tris, np.int64)
    inside, fb = classify_points(np.asarray(point, float)[None], [0, tris.size], tris, mesh)
    return (InOut.IN if inside[0] else InOut.OUT), bool(fb[0])


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to ``p``, row by row (Voronoi-region walk)."""
    p, a, b, c = (np.asarray(v, dtype=float) for v in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        out = a + ab * (vb * denom)[:, None] + ac * (vc * denom)[:, None]
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    regions = [
        (vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None],
        (vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None],
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * t_bc[:, None],
    ]
    # vertex regions take precedence over edges, edges over the face
    for mask, val in zip(regions[::2][::-1], regions[1::2][::-1]):
        out = np.where(mask[:, None], val, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out
