# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


cdef inline double _dot(const double* a, const double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline void _cross(const double* a, const double* b, double* out) nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


def ray_cast(origins, dirs, v0, e1, e2, double tol_bary, double tol_t):
    v0a = np.ascontiguousarray(v0, dtype=np.float64)
    corner1 = v0a + e1
    corner2 = v0a + e2
    blo = np.minimum(np.minimum(v0a, corner1), corner2)
    bhi = np.maximum(np.maximum(v0a, corner1), corner2)
    margin = 1e-8 * (float(np.max(bhi.max(0) - blo.min(0))) + 1.0)
    cdef double[:, ::1] LO = blo - margin
    cdef double[:, ::1] HI = bhi + margin
    cdef bint along_x
    cdef const double[:, ::1] O = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[:, ::1] V0 = np.ascontiguousarray(v0, dtype=np.float64)
    cdef const double[:, ::1] E1 = np.ascontiguousarray(e1, dtype=np.float64)
    cdef const double[:, ::1] E2 = np.ascontiguousarray(e2, dtype=np.float64)
    cdef Py_ssize_t m = O.shape[0], ntri = V0.shape[0], i, j, k
    crossings_a = np.zeros(m, dtype=np.int64)
    degenerate_a = np.zeros(m, dtype=np.uint8)
    on_surface_a = np.zeros(m, dtype=np.uint8)
    cdef long long[::1] crossings = crossings_a
    cdef unsigned char[::1] degenerate = degenerate_a
    cdef unsigned char[::1] on_surface = on_surface_a
    scale_a = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    cdef const double[::1] scale = np.ascontiguousarray(scale_a)
    cdef double pvec[3]
    cdef double tvec[3]
    cdef double qvec[3]
    cdef double det, inv, u, v, w, t, mn
    with nogil:
        for i in range(m):
            along_x = D[i, 0] > 0.0 and D[i, 1] == 0.0 and D[i, 2] == 0.0
            for j in range(ntri):
                if along_x and (O[i, 1] < LO[j, 1] or O[i, 1] > HI[j, 1] or O[i, 2] < LO[j, 2]
                                or O[i, 2] > HI[j, 2] or O[i, 0] > HI[j, 0]):
                    continue
                _cross(&D[i, 0], &E2[j, 0], pvec)
                det = _dot(pvec, &E1[j, 0])
                if fabs(det) <= 1e-14 * scale[j]:
                    continue
                inv = 1.0 / det
                for k in range(3):
                    tvec[k] = O[i, k] - V0[j, k]
                u = _dot(tvec, pvec) * inv
                if u < -tol_bary or u > 1.0 + tol_bary:
                    continue
                _cross(tvec, &E1[j, 0], qvec)
                v = _dot(&D[i, 0], qvec) * inv
                w = 1.0 - u - v
                if v < -tol_bary or w < -tol_bary:
                    continue
                t = _dot(&E2[j, 0], qvec) * inv
                if fabs(t) <= tol_t:
                    on_surface[i] = 1
                if t > tol_t:
                    mn = u
                    if v < mn:
                        mn = v
                    if w < mn:
                        mn = w
                    if mn < tol_bary:
                        degenerate[i] = 1
                    else:
                        crossings[i] += 1
    return crossings_a, degenerate_a.astype(bool), on_surface_a.astype(bool)


cdef inline int _mt_hit(const double* o, const double* d, const double* v0, const double* e1,
                        const double* e2, double scale,
                        double tol_bary, double tol_t) nogil:
    """0 miss, 1 crossing ahead, 2 degenerate hit ahead; +4 when on-surface."""
    cdef double pvec[3]
    cdef double tvec[3]
    cdef double qvec[3]
    cdef double det, inv, u, v, w, t, mn
    cdef int k, code = 0
    _cross(d, e2, pvec)
    det = _dot(pvec, e1)
    if fabs(det) <= 1e-14 * scale:
        return 0
    inv = 1.0 / det
    for k in range(3):
        tvec[k] = o[k] - v0[k]
    u = _dot(tvec, pvec) * inv
    if u < -tol_bary or u > 1.0 + tol_bary:
        return 0
    _cross(tvec, e1, qvec)
    v = _dot(d, qvec) * inv
    w = 1.0 - u - v
    if v < -tol_bary or w < -tol_bary:
        return 0
    t = _dot(e2, qvec) * inv
    if fabs(t) <= tol_t:
        code = 4
    if t > tol_t:
        mn = u
        if v < mn:
            mn = v
        if w < mn:
            mn = w
        code += 2 if mn < tol_bary else 1
    return code


def ray_cast_binned(origins, dirs, ray_cell, cell_ptr, cell_tris, v0, e1, e2,
                    double tol_bary, double tol_t):
    cdef const double[:, ::1] O = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const long long[::1] RC = np.ascontiguousarray(ray_cell, dtype=np.int64)
    cdef const long long[::1] CP = np.ascontiguousarray(cell_ptr, dtype=np.int64)
    cdef const long long[::1] CT = np.ascontiguousarray(cell_tris, dtype=np.int64)
    cdef const double[:, ::1] V0 = np.ascontiguousarray(v0, dtype=np.float64)
    cdef const double[:, ::1] E1 = np.ascontiguousarray(e1, dtype=np.float64)
    cdef const double[:, ::1] E2 = np.ascontiguousarray(e2, dtype=np.float64)
    scale_a = np.ascontiguousarray(np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
    cdef double[::1] scale = scale_a
    cdef Py_ssize_t m = O.shape[0], i, q, j
    crossings_a = np.zeros(m, dtype=np.int64)
    degenerate_a = np.zeros(m, dtype=np.uint8)
    on_surface_a = np.zeros(m, dtype=np.uint8)
    cdef long long[::1] crossings = crossings_a
    cdef unsigned char[::1] degenerate = degenerate_a
    cdef unsigned char[::1] on_surface = on_surface_a
    cdef int code
    with nogil:
        for i in range(m):
            if RC[i] < 0:
                continue
            for q in range(CP[RC[i]], CP[RC[i] + 1]):
                j = CT[q]
                code = _mt_hit(&O[i, 0], &D[i, 0], &V0[j, 0], &E1[j, 0], &E2[j, 0], scale[j],
                               tol_bary, tol_t)
                if code & 4:
                    on_surface[i] = 1
                if code & 3 == 1:
                    crossings[i] += 1
                elif code & 3 == 2:
                    degenerate[i] = 1
    return crossings_a, degenerate_a.astype(bool), on_surface_a.astype(bool)


def normal_votes(points, ptr, tri_ids, centroids, normals):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long long[::1] PTR = np.ascontiguousarray(ptr, dtype=np.int64)
    cdef const long long[::1] T = np.ascontiguousarray(tri_ids, dtype=np.int64)
    cdef const double[:, ::1] C = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef const double[:, ::1] N = np.ascontiguousarray(normals, dtype=np.float64)
    cdef Py_ssize_t m = P.shape[0], i, q, t
    out_a = np.zeros(m, dtype=np.int64)
    cdef long long[::1] out = out_a
    cdef double s
    with nogil:
        for i in range(m):
            for q in range(PTR[i], PTR[i + 1]):
                t = T[q]
                s = ((P[i, 0] - C[t, 0]) * N[t, 0] + (P[i, 1] - C[t, 1]) * N[t, 1]
                     + (P[i, 2] - C[t, 2]) * N[t, 2])
                if s <= 0.0:
                    out[i] += 1
    return out_a


cdef inline bint _axis_ok(double pa, double pb, double pc, double rad) nogil:
    cdef double lo = pa, hi = pa
    if pb < lo:
        lo = pb
    if pc < lo:
        lo = pc
    if pb > hi:
        hi = pb
    if pc > hi:
        hi = pc
    return lo <= rad and hi >= -rad


def tri_box_overlap(a, b, c, center, half):
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef const double[:, ::1] Cc = np.ascontiguousarray(c, dtype=np.float64)
    cdef const double[:, ::1] X = np.ascontiguousarray(center, dtype=np.float64)
    cdef const double[:, ::1] H = np.ascontiguousarray(half, dtype=np.float64)
    cdef Py_ssize_t K = A.shape[0], i, k, e
    out_a = np.zeros(K, dtype=np.uint8)
    cdef unsigned char[::1] out = out_a
    cdef double p0[3]
    cdef double p1[3]
    cdef double p2[3]
    cdef double ed[3][3]
    cdef double nrm[3]
    cdef double ax[3]
    cdef double unit[3]
    cdef double rad
    cdef bint ok
    with nogil:
        for i in range(K):
            ok = True
            for k in range(3):
                p0[k] = A[i, k] - X[i, k]
                p1[k] = B[i, k] - X[i, k]
                p2[k] = Cc[i, k] - X[i, k]
            for k in range(3):
                if not _axis_ok(p0[k], p1[k], p2[k], H[i, k]):
                    ok = False
                    break
            if not ok:
                continue
            for k in range(3):
                ed[0][k] = p1[k] - p0[k]
                ed[1][k] = p2[k] - p1[k]
                ed[2][k] = p0[k] - p2[k]
            for k in range(3):
                ax[k] = -ed[2][k]
            _cross(ed[0], ax, nrm)
            rad = fabs(nrm[0]) * H[i, 0] + fabs(nrm[1]) * H[i, 1] + fabs(nrm[2]) * H[i, 2]
            if fabs(_dot(nrm, p0)) > rad:
                continue
            for k in range(3):
                unit[0] = 0.0
                unit[1] = 0.0
                unit[2] = 0.0
                unit[k] = 1.0
                for e in range(3):
                    _cross(unit, ed[e], ax)
                    rad = fabs(ax[0]) * H[i, 0] + fabs(ax[1]) * H[i, 1] + fabs(ax[2]) * H[i, 2]
                    if not _axis_ok(_dot(ax, p0), _dot(ax, p1), _dot(ax, p2), rad):
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                out[i] = 1
    return out_a.astype(bool)


def gauss_loop_matrix(op1, op2, gpw):
    cdef const double[:, ::1] A = np.ascontiguousarray(op1, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(op2, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(gpw, dtype=np.float64)
    cdef Py_ssize_t n1 = A.shape[0], n2 = B.shape[0], m = W.shape[0], g, i, j
    out_a = np.zeros((n1, n2))
    cdef double[:, ::1] out = out_a
    cdef double s
    with nogil:
        for g in range(m):
            for i in range(n1):
                s = W[g] * A[i, g]
                for j in range(n2):
                    out[i, j] += s * B[j, g]
    return out_a


def gauss_loop_batch(op1, op2, gpw):
    cdef const double[:, ::1] A = np.ascontiguousarray(op1, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(op2, dtype=np.float64)
    cdef const double[:, ::1] W = np.ascontiguousarray(gpw, dtype=np.float64)
    cdef Py_ssize_t n1 = A.shape[0], n2 = B.shape[0], m = A.shape[1], ne = W.shape[0]
    cdef Py_ssize_t e, g, i, j
    out_a = np.zeros((ne, n1, n2))
    cdef double[:, :, ::1] out = out_a
    cdef double s
    with nogil:
        for e in range(ne):
            for g in range(m):
                for i in range(n1):
                    s = W[e, g] * A[i, g]
                    for j in range(n2):
                        out[e, i, j] += s * B[j, g]
    return out_a
