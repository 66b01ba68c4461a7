"""Residual-based stabilization parameters on hexahedra.

With the element metric ``G = (2/h)^2 I``:

    tau_M = (4/dt^2 + u.G.u + C_I nu^2 G:G)^(-1/2)
    tau_C = 1 / (tau_M tr G)
    tau_bar = (u'.G.u')^(-1/2)

All functions accept complex input so they can be differentiated by complex step.
"""
import numpy as np

C_I = 36.0
GUARD = 1e-12


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def tau_m(h, u, mu, rho=1.0, dt=None, c_i=C_I, advection=True):
    g = (2.0 / np.asarray(h)) ** 2
    nu = mu / rho
    val = c_i * nu ** 2 * 3.0 * g ** 2
    if advection:
        val = val + g * _dot(u, u)
    if dt:
        val = val + 4.0 / dt ** 2
    return (val + GUARD) ** -0.5


def tau_c(h, tm):
    g = (2.0 / np.asarray(h)) ** 2
    return 1.0 / (tm * 3.0 * g)


def tau_bar(h, u_fine):
    g = (2.0 / np.asarray(h)) ** 2
    return (g * _dot(u_fine, u_fine) + GUARD) ** -0.5


def stabilization_params(h, u, mu, rho=1.0, dt=None, c_i=C_I, u_fine=None):
    """Return ``(tau_M, tau_C, tau_bar)``; ``tau_bar`` is None without ``u_fine``."""
    tm = tau_m(h, u, mu, rho, dt, c_i)
    tc = tau_c(h, tm)
    tb = None if u_fine is None else tau_bar(h, u_fine)
    return tm, tc, tb


def fine_scale(res_m, div_u, tm, tc, rho=1.0):
    """``u' = -tau_M r_M`` and ``p' = -rho tau_C div u``."""
    return -tm[..., None] * res_m, -rho * tc * div_u
