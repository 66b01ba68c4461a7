"""Scalar model forms."""
import numpy as np

from .assembly import PointwiseForm, VAL, DX, DZ

NITSCHE_CB = 8.0
H_B_FLOOR = 0.01


class PoissonForm(PointwiseForm):
    """``-div(k grad u) = f`` with optional weak Dirichlet data on the immersed surface.

    ``source(x)`` and ``dirichlet(x)`` are callables on (P, 3) points.
    The surface terms are the symmetric Nitsche ones with penalty ``C_b k / h_b``.
    """
    nf = 1

    def __init__(self, source=None, dirichlet=None, conductivity=1.0, c_b=NITSCHE_CB):
        self.source = source
        self.dirichlet = dirichlet
        self.k = conductivity
        self.c_b = c_b

    def volume(self, V, pts):
        S = np.zeros(V.shape[:2], dtype=V.dtype)
        if self.source is not None:
            S[:, 0] = -self.source(pts.x)
        F = self.k * V[:, :, DX:DZ + 1]
        return S, F

    def penalty(self, pts):
        hb = pts.h if pts.h_b is None else pts.h_b
        return self.c_b * self.k / np.maximum(hb, H_B_FLOOR * pts.h)

    def surface(self, V, pts):
        if self.dirichlet is None:
            return None
        n = pts.normal
        g = self.dirichlet(pts.x)
        e = V[:, 0, VAL] - g
        dn = np.einsum("pk,pk->p", V[:, 0, DX:DZ + 1], n)
        S = (-self.k * dn + self.penalty(pts) * e)[:, None]
        F = (-self.k * e[:, None] * n)[:, None, :]
        return S, F
