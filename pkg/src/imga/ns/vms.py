"""Pointwise VMS Navier-Stokes form with Nitsche terms on the immersed surface.

Fields are ordered (u, v, w, p). With a time step the velocity in every term
is the midpoint ``(u^{n+1} + u^n) / 2`` (theta = 1 gives backward Euler) and
the pressure is taken at ``n+1``.
"""
import numpy as np

from ..fem.assembly import PointwiseForm, VAL, DX, DZ, LAP
from . import stabilization as stab

C_B = 8.0
H_B_FLOOR = 0.01


def _zero_vec(x, t=0.0):
    return np.zeros_like(x)


class NavierStokesForm(PointwiseForm):
    nf = 4

    def __init__(self, re, rho=1.0, forcing=None, wall=None, dt=None, theta=0.5,
                 advection=True, c_i=stab.C_I, c_b=C_B, t=0.0):
        if re <= 0:
            raise ValueError("Reynolds number must be positive")
        self.re = float(re)
        self.rho = rho
        self.forcing = forcing
        self.wall = _zero_vec if wall is None else wall
        self.dt = dt
        self.theta = theta
        self.advection = advection
        self.c_i = c_i
        self.c_b = c_b
        self.t = t

    @property
    def mu(self):
        return 1.0 / self.re

    def _state(self, V, pts):
        u = V[:, :3, VAL]
        gu = V[:, :3, DX:DZ + 1]           # gu[p, i, k] = d u_i / d x_k
        lap = V[:, :3, LAP]
        if self.dt:
            prev = pts.prev
            th = self.theta
            ut = (u - prev[:, :3, VAL]) / self.dt
            u = th * u + (1 - th) * prev[:, :3, VAL]
            gu = th * gu + (1 - th) * prev[:, :3, DX:DZ + 1]
            lap = th * lap + (1 - th) * prev[:, :3, LAP]
            tm = self.t - (1 - th) * self.dt
        else:
            ut = np.zeros_like(u)
            tm = self.t
        return u, gu, lap, ut, V[:, 3, VAL], V[:, 3, DX:DZ + 1], tm

    def fine_scales(self, V, pts):
        """Strong momentum residual, stabilization parameters and fine scales."""
        u, gu, lap, ut, p, gp, tm = self._state(V, pts)
        rho, mu = self.rho, self.mu
        f = np.zeros(u.shape) if self.forcing is None else self.forcing(pts.x, tm)
        conv = np.einsum("pk,pik->pi", u, gu) if self.advection else 0.0
        res = rho * (ut + conv - f) + gp - mu * lap
        t_m = stab.tau_m(pts.h, u, mu, rho, self.dt, self.c_i, self.advection)
        t_c = stab.tau_c(pts.h, t_m)
        div = gu[:, 0, 0] + gu[:, 1, 1] + gu[:, 2, 2]
        uf, pf = stab.fine_scale(res, div, t_m, t_c, rho)
        return dict(u=u, gu=gu, ut=ut, p=p, f=f, conv=conv, res=res, tau_m=t_m,
                    tau_c=t_c, div=div, u_fine=uf, p_fine=pf)

    def volume(self, V, pts):
        q = self.fine_scales(V, pts)
        rho, mu = self.rho, self.mu
        u, gu, uf, pf = q["u"], q["gu"], q["u_fine"], q["p_fine"]
        P = V.shape[0]
        eye = np.eye(3)
        S = np.zeros((P, 4), dtype=V.dtype)
        F = np.zeros((P, 4, 3), dtype=V.dtype)
        S[:, :3] = rho * (q["ut"] + q["conv"] - q["f"])
        S[:, 3] = q["div"]
        F[:, :3] = -q["p"][:, None, None] * eye + mu * (gu + gu.transpose(0, 2, 1))
        # pressure stabilization and the grad-div fine-scale term
        F[:, 3] = -uf / rho
        F[:, :3] -= pf[:, None, None] * eye
        if self.advection:
            ufgu = np.einsum("pk,pik->pi", uf, gu)
            tb = stab.tau_bar(pts.h, uf)
            S[:, :3] += ufgu
            F[:, :3] -= uf[:, :, None] * u[:, None, :]
            F[:, :3] -= uf[:, :, None] * uf[:, None, :] / rho
            F[:, :3] += (tb[:, None] * ufgu)[:, :, None] * uf[:, None, :]
        return S, F

    def penalty(self, pts):
        hb = pts.h if pts.h_b is None else pts.h_b
        hb = np.maximum(hb, H_B_FLOOR * pts.h)
        return self.c_b / (self.re * hb)

    def surface_terms(self, V, pts):
        """Surface integrands split by kind; momentum sums give the body force."""
        u, gu, _, _, p, _, tm = self._state(V, pts)
        n = pts.normal
        mu, rho = self.mu, self.rho
        e = u - self.wall(pts.x, tm)
        tau_b = self.penalty(pts)
        en = np.sum(e * n, axis=1)
        un = np.sum(u * n, axis=1)
        sym = gu + gu.transpose(0, 2, 1)
        inflow = (np.real(un) < 0).astype(float)
        return dict(
            pressure=p[:, None] * n,
            viscous=-mu * np.einsum("pik,pk->pi", sym, n),
            inflow=-(rho * inflow * un)[:, None] * e,
            tangential=tau_b[:, None] * (e - en[:, None] * n),
            normal=(tau_b * en)[:, None] * n,
            adjoint_q=-en,
            adjoint_w=-mu * (n[:, None, :] * e[:, :, None] + n[:, :, None] * e[:, None, :]),
        )

    def surface(self, V, pts):
        terms = self.surface_terms(V, pts)
        P = V.shape[0]
        S = np.zeros((P, 4), dtype=V.dtype)
        F = np.zeros((P, 4, 3), dtype=V.dtype)
        for k in ("pressure", "viscous", "inflow", "tangential", "normal"):
            S[:, :3] += terms[k]
        S[:, 3] = terms["adjoint_q"]
        F[:, :3] = terms["adjoint_w"]
        return S, F


def stokes_form(re, **kw):
    """Stokes limit: the same form with every advective term removed."""
    return NavierStokesForm(re, advection=False, **kw)
