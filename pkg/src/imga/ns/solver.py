"""Newton, Krylov and time-stepping drivers."""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from ..fem.assembly import Assembler, empty_rows, pin_rows

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    newton_rtol: float = 1e-6
    newton_atol: float = 1e-6
    max_newton: int = 20
    krylov: str = "bicgstab"        # bicgstab | gmres | direct
    precond: str = "ilu"            # ilu | jacobi | none
    krylov_tol: float = 1e-6
    krylov_maxiter: int = 2000
    line_search: bool = True
    max_backtracks: int = 8
    ilu_drop: float = 1e-5
    ilu_fill: float = 20.0

    def __post_init__(self):
        for k in ("newton_rtol", "newton_atol", "krylov_tol"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.krylov not in ("bicgstab", "gmres", "direct"):
            raise ValueError(f"unknown Krylov method {self.krylov!r}")
        if self.precond not in ("ilu", "jacobi", "none"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")


class NewtonDivergence(RuntimeError):
    def __init__(self, message, state, history):
        super().__init__(message)
        self.state = state
        self.history = history


@dataclass
class LinearInfo:
    method: str
    iterations: int
    fallback: bool = False


@dataclass
class NewtonInfo:
    iterations: int
    residuals: list
    linear: list = field(default_factory=list)
    converged: bool = True


def _preconditioner(J, cfg):
    if cfg.precond == "ilu":
        try:
            ilu = spl.spilu(J.tocsc(), drop_tol=cfg.ilu_drop, fill_factor=cfg.ilu_fill)
            return spl.LinearOperator(J.shape, ilu.solve)
        except RuntimeError as exc:
            log.warning("ILU failed (%s); using Jacobi", exc)
    if cfg.precond in ("ilu", "jacobi"):
        d = J.diagonal()
        d = np.where(d == 0, 1.0, d)
        return spl.LinearOperator(J.shape, lambda x: x / d)
    return None


def solve_linear(J, b, cfg=SolverConfig()):
    """Solve ``J x = b``; a failed Krylov solve falls back to a direct one."""
    if cfg.krylov == "direct":
        return spl.spsolve(J.tocsc(), b), LinearInfo("direct", 1)
    M = _preconditioner(J, cfg)
    count = [0]

    def cb(*_):
        count[0] += 1

    kw = dict(rtol=cfg.krylov_tol, atol=0.0, maxiter=cfg.krylov_maxiter, M=M, callback=cb)
    if cfg.krylov == "bicgstab":
        x, info = spl.bicgstab(J, b, **kw)
    else:
        x, info = spl.gmres(J, b, restart=100, callback_type="pr_norm", **kw)
    if info != 0 or not np.all(np.isfinite(x)):
        log.warning("%s did not converge (info=%d); solving directly", cfg.krylov, info)
        return spl.spsolve(J.tocsc(), b), LinearInfo(cfg.krylov, count[0], True)
    return x, LinearInfo(cfg.krylov, count[0])


def boundary_nodes(disc, tol=1e-9):
    """Global node indices on each face of the root box: keys xmin, xmax, ymin, ..."""
    X = disc.global_coords()
    lo, hi = disc.tree.box.lo, disc.tree.box.hi
    span = tol * (hi - lo).max()
    out = {}
    for k, ax in enumerate("xyz"):
        out[f"{ax}min"] = np.flatnonzero(np.abs(X[:, k] - lo[k]) <= span)
        out[f"{ax}max"] = np.flatnonzero(np.abs(X[:, k] - hi[k]) <= span)
    return out


@dataclass
class DirichletBC:
    """Strong data on ``nodes`` (global node indices) for ``field``.

    ``value`` is a constant or ``value(x, t) -> (P,)``.
    """
    nodes: np.ndarray
    field: int
    value: object = 0.0


class FlowProblem:
    """Nonlinear system ``R(U) = 0`` with strong Dirichlet rows."""

    def __init__(self, disc, form, bcs=(), config=None, **assembler_kw):
        self.disc = disc
        self.form = form
        self.nf = form.nf
        self.assembler = Assembler(disc, form, **assembler_kw)
        self.bcs = list(bcs)
        self.config = config or SolverConfig()
        inactive = np.asarray(disc.inactive, dtype=np.int64)
        self._inactive = (inactive[:, None] * self.nf + np.arange(self.nf)).ravel()
        self._coords = disc.global_coords()
        self._empty = None

    @property
    def n_dofs(self):
        return self.disc.n_global * self.nf

    def fixed(self, t=0.0):
        """Pinned dofs and their values (inactive nodes hold zero)."""
        dofs, vals = [self._inactive], [np.zeros(self._inactive.size)]
        if self._empty is not None:
            dofs.append(self._empty)
            vals.append(np.zeros(self._empty.size))
        for bc in self.bcs:
            nodes = np.asarray(bc.nodes, dtype=np.int64)
            v = bc.value(self._coords[nodes], t) if callable(bc.value) else np.full(nodes.size, float(bc.value))
            dofs.append(nodes * self.nf + bc.field)
            vals.append(np.asarray(v, float))
        d = np.concatenate(dofs)
        v = np.concatenate(vals)
        # later entries win; the last condition listed for a dof takes effect
        _, first = np.unique(d[::-1], return_index=True)
        keep = d.size - 1 - first
        return d[keep], v[keep]

    def apply(self, U, t=0.0):
        d, v = self.fixed(t)
        U = np.array(U, float)
        U[d] = v
        return U

    def residual(self, U, prev=None, t=0.0):
        R = self.assembler.residual(U, prev)
        d, v = self.fixed(t)
        R[d] = U[d] - v
        return R

    def linearize(self, U, prev=None, t=0.0):
        J, R = self.assembler.linearize(U, prev)
        if self._empty is None:
            self._empty = empty_rows(J)
        d, v = self.fixed(t)
        return pin_rows(J, R, d, U[d] - v)

    def newton(self, U0, prev=None, t=0.0):
        cfg = self.config
        U = self.apply(U0, t)
        hist, lin = [], []
        r0 = None
        for it in range(cfg.max_newton + 1):
            J, R = self.linearize(U, prev, t)
            rn = float(np.linalg.norm(R))
            hist.append(rn)
            r0 = rn if r0 is None else r0
            if not np.isfinite(rn):
                raise NewtonDivergence("non-finite residual", U, hist)
            if rn <= cfg.newton_atol or rn <= cfg.newton_rtol * r0:
                return U, NewtonInfo(it, hist, lin, True)
            if it == cfg.max_newton:
                break
            dU, li = solve_linear(J, -R, cfg)
            lin.append(li)
            lam = 1.0
            if cfg.line_search:
                for _ in range(cfg.max_backtracks):
                    trial = float(np.linalg.norm(self.residual(U + lam * dU, prev, t)))
                    if np.isfinite(trial) and trial < (1.0 - 1e-4 * lam) * rn:
                        break
                    lam *= 0.5
            U = U + lam * dU
        raise NewtonDivergence(f"Newton did not converge in {cfg.max_newton} iterations "
                               f"(|R| = {hist[-1]:.3e})", U, hist)

    def steady(self, U0=None, t=0.0):
        self.form.dt = None
        U0 = np.zeros(self.n_dofs) if U0 is None else U0
        return self.newton(U0, None, t)

    def time_step(self, U, t, dt):
        """Advance from ``t`` to ``t + dt``."""
        self.form.dt = dt
        self.form.t = t + dt
        return self.newton(U, U, t + dt)


@dataclass
class Stage:
    """A block of time steps at fixed Reynolds number and step size."""
    steps: int
    dt: float
    re: float = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("time step must be positive")


def run(problem, U0, stages, t0=0.0, on_step=None):
    """Time loop over ``stages`` (a Reynolds ramp when ``re`` changes).

    ``on_step(k, t, U, info)`` is called after every step. Returns the final
    state, time and the per-step Newton info.
    """
    U, t, infos, k = np.array(U0, float), t0, [], 0
    for st in stages:
        if st.re is not None:
            problem.form.re = float(st.re)
        for _ in range(st.steps):
            U, info = problem.time_step(U, t, st.dt)
            t += st.dt
            k += 1
            infos.append(info)
            if on_step:
                on_step(k, t, U, info)
    return U, t, infos
