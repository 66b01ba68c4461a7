"""Tensor-product Lagrange bases on the reference hexahedron [-1, 1]^3."""
from dataclasses import dataclass

import numpy as np

from ..classify import tensor_gauss
from ..octree import lagrange_1d, slot_offsets


def lagrange_1d_derivs(order, x):
    """Values, first and second derivatives of the 1D equispaced basis."""
    x = np.asarray(x, dtype=float)
    nodes = np.linspace(-1.0, 1.0, order + 1)
    val = lagrange_1d(order, x)
    d1 = np.zeros_like(val)
    d2 = np.zeros_like(val)
    for a in range(order + 1):
        others = [b for b in range(order + 1) if b != a]
        den = np.prod([nodes[a] - nodes[b] for b in others])
        # derivatives of prod_b (x - x_b) by the product rule
        for i in others:
            term = np.ones_like(x)
            for b in others:
                if b != i:
                    term = term * (x - nodes[b])
            d1[..., a] += term / den
            for j in others:
                if j == i:
                    continue
                t2 = np.ones_like(x)
                for b in others:
                    if b not in (i, j):
                        t2 = t2 * (x - nodes[b])
                d2[..., a] += t2 / den
    return val, d1, d2


def evaluate(bf, xi, second=False):
    """Basis values ``phi`` (n, q), gradients ``dphi`` (3, n, q) and optionally
    Hessians (3, 3, n, q) at reference points ``xi`` (q, 3)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    offs = slot_offsets(bf)
    V, D, DD = zip(*(lagrange_1d_derivs(bf, xi[:, k]) for k in range(3)))
    # (q, n) factors per direction
    v = [V[k][:, offs[:, k]] for k in range(3)]
    d = [D[k][:, offs[:, k]] for k in range(3)]
    phi = (v[0] * v[1] * v[2]).T
    dphi = np.stack([(d[0] * v[1] * v[2]).T, (v[0] * d[1] * v[2]).T, (v[0] * v[1] * d[2]).T])
    if not second:
        return phi, dphi
    dd = [DD[k][:, offs[:, k]] for k in range(3)]
    H = np.empty((3, 3) + phi.shape)
    for a in range(3):
        for b in range(3):
            f = [v[0], v[1], v[2]]
            if a == b:
                f[a] = dd[a]
            else:
                f[a] = d[a]
                f[b] = d[b]
            H[a, b] = (f[0] * f[1] * f[2]).T
    return phi, dphi, H


@dataclass(frozen=True)
class ReferenceBasis:
    """Basis tables at the tensor Gauss points, cached once per (bf, ngp).

    ``phi[i, j]`` is basis ``i`` at point ``j``; ``dphi[k]`` holds the
    ``k``-th reference derivative in the same layout.
    """
    bf: int
    ngp: int
    points: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    hess: np.ndarray
    interp_1d: np.ndarray

    @property
    def n(self):
        return (self.bf + 1) ** 3

    @property
    def nq(self):
        return self.weights.size


def child_interp_1d(bf):
    """``I[c]`` maps the coarse 1D nodal values to those of child half ``c``."""
    nodes = np.linspace(-1.0, 1.0, bf + 1)
    out = np.empty((2, bf + 1, bf + 1))
    for c in (0, 1):
        x = 0.5 * (nodes + 1.0) + (c - 1.0)
        out[c] = lagrange_1d(bf, x)
    return out


_CACHE = {}


def precompute_basis(bf=1, ngp=None):
    ngp = bf + 1 if ngp is None else ngp
    if bf not in (1, 2):
        raise ValueError("basis order must be 1 or 2")
    if ngp < bf + 1:
        raise ValueError("need at least bf + 1 Gauss points per direction")
    key = (bf, ngp)
    if key not in _CACHE:
        pts, w = tensor_gauss(ngp)
        phi, dphi, hess = evaluate(bf, pts, second=True)
        for arr in (pts, w, phi, dphi, hess):
            arr.setflags(write=False)
        _CACHE[key] = ReferenceBasis(bf, ngp, pts, w, phi, dphi, hess, child_interp_1d(bf))
    return _CACHE[key]


def interpolate_to_gauss(basis, nodal, h=None):
    """Values and physical gradients of nodal fields at the basis points.

    ``nodal`` is (n,) for one scalar field or (..., n, nf). Gradients carry
    a trailing axis of length 3 and are scaled by 2/h when ``h`` is given.
    """
    nodal = np.asarray(nodal, float)
    scalar = nodal.ndim == 1
    if scalar:
        nodal = nodal[:, None]
    vals = np.einsum("nq,...nf->...qf", basis.phi, nodal)
    grads = np.einsum("knq,...nf->...qfk", basis.dphi, nodal)
    if h is not None:
        h = np.asarray(h, float)
        grads = grads * (2.0 / h).reshape(h.shape + (1, 1, 1))
    if scalar:
        return vals[..., 0], grads[..., 0, :]
    return vals, grads
