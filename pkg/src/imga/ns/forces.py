"""Integrated surface forces and the force-history CSV."""
import csv
from dataclasses import dataclass

import numpy as np

COMPONENTS = ("pressure", "viscous", "inflow", "tangential", "normal")


@dataclass
class Forces:
    total: np.ndarray                # (3,)
    parts: dict                      # component -> (3,)

    def coefficients(self, rho=1.0, speed=1.0, area=1.0, drag_axis=0, lift_axis=1):
        q = 0.5 * rho * speed ** 2 * area
        return self.total[drag_axis] / q, self.total[lift_axis] / q


def surface_forces(assembler, U, prev=None):
    """Force exerted by the fluid on the immersed body.

    The body feels the reaction to the boundary terms of the momentum
    equations, which equals the surface integral of their pointwise sources.
    """
    disc, form = assembler.disc, assembler.form
    nf = form.nf
    Ue = disc.expand(U, nf)
    Pe = None if prev is None else disc.expand(prev, nf)
    parts = {k: np.zeros(3) for k in COMPONENTS}
    for ps in disc.surface_sets(disc.order("sfc")):
        V, pts = assembler._states(ps, Ue, Pe)
        terms = form.surface_terms(V, pts)
        w = ps.weights.ravel()
        for k in COMPONENTS:
            parts[k] += np.real(w @ terms[k])
    return Forces(sum(parts.values()), parts)


class ForceHistory:
    """Appends one CSV row per step: time, C_d, C_l and per-part drag."""

    def __init__(self, path, rho=1.0, speed=1.0, area=1.0):
        self.path = path
        self.q = dict(rho=rho, speed=speed, area=area)
        self.rows = []
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["time", "C_d", "C_l"] + [f"C_d_{k}" for k in COMPONENTS])

    def append(self, t, forces):
        cd, cl = forces.coefficients(**self.q)
        scale = 0.5 * self.q["rho"] * self.q["speed"] ** 2 * self.q["area"]
        row = [t, cd, cl] + [forces.parts[k][0] / scale for k in COMPONENTS]
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(float(v)) for v in row])
        return cd, cl
