"""Residual and Jacobian assembly for pointwise weak forms.

A form supplies, at every quadrature point, a source ``S`` (P, nf) paired
with the test function value and a flux ``F`` (P, nf, 3) paired with the
test gradient:

    R[a, i] = sum_q w_q (phi_a S_i + d_k phi_a F_ik)

Both are functions of the interpolated state ``V`` (P, nf, 5) holding value,
gradient and Laplacian of every field. The Jacobian follows from the
derivatives of ``S`` and ``F`` with respect to ``V`` (complex step), and every
(test op, trial op, field, field) block is one ``op1 diag(c w) op2^T``
elemental product.
"""
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
import scipy.io
import scipy.sparse as sp

from ..classify import Marker
from ..partition import DEPENDENT
from .basis import evaluate, precompute_basis
from .elemental import ele_matrices, ele_matrices_loop, compute_ele_matrix_loop
from .hanging import compute_hanging_corrections

VAL, DX, DY, DZ, LAP = range(5)
NOPS = 5
CS_STEP = 1e-30
CHUNK = 2048


class AssemblyError(RuntimeError):
    pass


class PointwiseForm:
    """Base class for weak forms. ``volume`` is mandatory."""
    nf = 1

    def volume(self, V, pts):
        raise NotImplementedError

    def surface(self, V, pts):
        return None


@dataclass
class PointSet:
    """Quadrature points of a batch of elements.

    ``ops`` is shared (NOPS, n, q) or per element (E, NOPS, n, q); ``scale``
    (E, NOPS) converts reference derivatives to physical ones.
    """
    elements: np.ndarray
    ops: np.ndarray
    weights: np.ndarray
    x: np.ndarray
    scale: np.ndarray
    normal: np.ndarray = None
    kind: str = "volume"

    @property
    def shared(self):
        return self.ops.ndim == 3

    @property
    def shape(self):
        return self.weights.shape


def _op_table(bf, xi):
    """(NOPS, n, q) table: value, three reference derivatives, reference Laplacian."""
    if bf == 1:
        phi, dphi = evaluate(bf, xi)
        lap = np.zeros_like(phi)
    else:
        phi, dphi, H = evaluate(bf, xi, second=True)
        lap = H[0, 0] + H[1, 1] + H[2, 2]
    return np.concatenate([phi[None], dphi, lap[None]])


def _op_scale(h):
    s = 2.0 / h
    return np.stack([np.ones_like(h), s, s, s, s * s], axis=1)


def _ragged_ops(bf, xi, counts):
    """Pad ragged per-element point lists to a common length."""
    E = counts.size
    P = max(int(counts.max()), 1)
    table = _op_table(bf, xi)                                  # (NOPS, n, T)
    n = table.shape[1]
    ptr = np.concatenate([[0], np.cumsum(counts)])
    col = np.arange(xi.shape[0]) - np.repeat(ptr[:-1], counts)
    row = np.repeat(np.arange(E), counts)
    ops = np.zeros((E, NOPS, n, P))
    ops[row, :, :, col] = table.transpose(2, 0, 1)
    mask = np.zeros((E, P), dtype=bool)
    mask[row, col] = True
    return ops, row, col, mask


class Discretization:
    """Mesh artifacts needed for assembly, bundled once per mesh."""

    def __init__(self, tree, nodemap, markers=None, plan=None, tags=None, ngp=None,
                 inactive=None, h_b=None):
        self.tree = tree
        self.nodemap = nodemap
        self.bf = nodemap.bf
        self.basis = precompute_basis(self.bf, ngp)
        self.markers = (np.full(tree.n_leaves, Marker.OUT, dtype=np.int8)
                        if markers is None else np.asarray(markers))
        if plan is None and np.any(self.markers == Marker.INTERCEPTED):
            raise AssemblyError("intercepted elements need a quadrature plan")
        self.plan = plan
        self.tags = tags
        self.corrections = compute_hanging_corrections(tree, nodemap)
        self.dofs_e = self.corrections.element_dofs(nodemap)
        self._mslot = np.full(tree.n_leaves, -1, dtype=np.int64)
        self._mslot[self.corrections.elements] = np.arange(self.corrections.elements.size)
        self.inactive = np.zeros(0, dtype=np.int64) if inactive is None else np.asarray(inactive)
        self.h_b = h_b
        self._ref = _op_table(self.bf, self.basis.points)

    @property
    def n_global(self):
        return self.nodemap.n_global

    def global_nodes(self):
        return np.flatnonzero(self.nodemap.global_index >= 0)

    def global_coords(self):
        return self.nodemap.coords[self.global_nodes()]

    def order(self, mode="dependent-first"):
        """Element visiting order (In elements are never visited)."""
        live = np.flatnonzero(self.markers != Marker.IN)
        if isinstance(mode, np.ndarray):
            return mode[self.markers[mode] != Marker.IN]
        if mode == "sfc":
            return live
        if mode == "reverse":
            return live[::-1]
        if mode == "dependent-first":
            if self.tags is None:
                return live
            dep = self.tags[live] == DEPENDENT
            return np.concatenate([live[dep], live[~dep]])
        raise ValueError(f"unknown element order {mode!r}")

    # -- point sets ---------------------------------------------------------

    def volume_sets(self, elements):
        out = []
        tree = self.tree
        m = self.markers[elements]
        reg = elements[m == Marker.OUT]
        if reg.size:
            h = tree.h[reg]
            xi = self.basis.points
            x = tree.lower[reg][:, None, :] + 0.5 * (xi[None] + 1.0) * h[:, None, None]
            w = self.basis.weights[None] * (0.5 * h[:, None]) ** 3
            out.append(PointSet(reg, self._ref, w, x, _op_scale(h)))
        cut = elements[m == Marker.INTERCEPTED]
        if cut.size:
            plan = self.plan
            slots = np.searchsorted(plan.elements, cut)
            if np.any(plan.elements[np.minimum(slots, plan.elements.size - 1)] != cut):
                raise AssemblyError("missing quadrature plan for an intercepted element")
            lo, hi = plan.vol_ptr[slots], plan.vol_ptr[slots + 1]
            idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if cut.size else []
            counts = hi - lo
            ops, row, col, mask = _ragged_ops(self.bf, plan.vol_xi[idx], counts)
            h = tree.h[cut]
            w = np.zeros(mask.shape)
            w[row, col] = plan.vol_w[idx] * (0.5 * h[row]) ** 3
            xi = np.zeros(mask.shape + (3,))
            xi[row, col] = plan.vol_xi[idx]
            x = tree.lower[cut][:, None, :] + 0.5 * (xi + 1.0) * h[:, None, None]
            out.append(PointSet(cut, ops, w, x, _op_scale(h)))
        return out

    def surface_sets(self, elements):
        plan = self.plan
        if plan is None or plan.elements.size == 0:
            return []
        cut = elements[self.markers[elements] == Marker.INTERCEPTED]
        if cut.size == 0:
            return []
        slots = np.searchsorted(plan.elements, cut)
        lo, hi = plan.surf_ptr[slots], plan.surf_ptr[slots + 1]
        keep = hi > lo
        cut, lo, hi = cut[keep], lo[keep], hi[keep]
        if cut.size == 0:
            return []
        idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)])
        counts = hi - lo
        elem = np.repeat(cut, counts)
        h = self.tree.h[cut]
        xi = 2.0 * (plan.surf_x[idx] - self.tree.lower[elem]) / self.tree.h[elem][:, None] - 1.0
        ops, row, col, mask = _ragged_ops(self.bf, xi, counts)
        w = np.zeros(mask.shape)
        w[row, col] = plan.surf_w[idx]
        x = np.zeros(mask.shape + (3,))
        x[row, col] = plan.surf_x[idx]
        nrm = np.zeros(mask.shape + (3,))
        nrm[:, :, 0] = 1.0
        # the fluid's outward normal points into the body
        nrm[row, col] = -plan.surf_n[idx]
        return [PointSet(cut, ops, w, x, _op_scale(h), nrm, "surface")]

    # -- field transfer -----------------------------------------------------

    def expand(self, U, nf):
        """Global dof vector -> element slot values (E_all, n, nf)."""
        Un = self.nodemap.constraint @ np.asarray(U).reshape(-1, nf)
        return Un[self.nodemap.conn]

    def interpolate(self, ps, Ue):
        """Values of ``V`` (E, q, nf, NOPS) at the points of ``ps``."""
        if ps.shared:
            V = np.einsum("sbq,ebj->eqjs", ps.ops, Ue, optimize=True)
        else:
            V = np.einsum("esbq,ebj->eqjs", ps.ops, Ue, optimize=True)
        return V * ps.scale[:, None, None, :]

    def point_data(self, ps, prev=None):
        E, q = ps.shape
        h = np.repeat(self.tree.h[ps.elements], q)
        pts = SimpleNamespace(x=ps.x.reshape(-1, 3), h=h, elements=np.repeat(ps.elements, q),
                              normal=None if ps.normal is None else ps.normal.reshape(-1, 3),
                              prev=None, h_b=None, kind=ps.kind)
        if prev is not None:
            pts.prev = prev.reshape(E * q, *prev.shape[2:])
        if self.h_b is not None:
            pts.h_b = self.h_b[pts.elements]
        return pts


def _kernel(form, ps, V, pts):
    fn = form.volume if ps.kind == "volume" else form.surface
    out = fn(V, pts)
    if out is None:
        # a form without surface data contributes nothing there
        P, nf = V.shape[:2]
        return np.zeros((P, nf), V.dtype), np.zeros((P, nf, 3), V.dtype)
    return out


def _linearize(form, ps, V, pts, channels):
    """S, F and their complex-step derivatives with respect to ``V``."""
    P, nf = V.shape[0], V.shape[1]
    S, F = _kernel(form, ps, V, pts)
    S = np.real(S)
    F = np.real(F)
    dS = np.zeros((P, nf, nf, NOPS))
    dF = np.zeros((P, nf, 3, nf, NOPS))
    Vc = V.astype(complex)
    for j in range(nf):
        for s in channels:
            Vc[:, j, s] += 1j * CS_STEP
            Sc, Fc = _kernel(form, ps, Vc, pts)
            Vc[:, j, s] = V[:, j, s]
            dS[:, :, j, s] = np.imag(Sc) / CS_STEP
            dF[:, :, :, j, s] = np.imag(Fc) / CS_STEP
    return S, F, dS, dF


def _residual_block(ps, S, F):
    """Element residuals (E, n, nf) from point sources and fluxes."""
    E, q = ps.shape
    S = S.reshape(E, q, -1) * ps.weights[..., None]
    F = F.reshape(E, q, S.shape[-1], 3) * ps.weights[..., None, None]
    if ps.shared:
        r = np.einsum("aq,eqi->eai", ps.ops[VAL], S)
        for k in range(3):
            r += ps.scale[:, 1 + k, None, None] * np.einsum("aq,eqi->eai", ps.ops[1 + k], F[..., k])
    else:
        r = np.einsum("eaq,eqi->eai", ps.ops[:, VAL], S)
        for k in range(3):
            r += ps.scale[:, 1 + k, None, None] * np.einsum("eaq,eqi->eai", ps.ops[:, 1 + k], F[..., k])
    return r


def _matrix_block(ps, dS, dF, nf, channels, path):
    """Element Jacobians (E, n, nf, n, nf), one elemental product per block."""
    E, q = ps.shape
    n = ps.ops.shape[-2]
    K = np.zeros((E, n, nf, n, nf))
    dS = dS.reshape(E, q, nf, nf, NOPS)
    dF = dF.reshape(E, q, nf, 3, nf, NOPS)
    for t in range(4):
        coef = dS if t == VAL else dF[:, :, :, t - 1]
        for s in channels:
            for i in range(nf):
                for j in range(nf):
                    c = coef[:, :, i, j, s]
                    if not c.any():
                        continue
                    scale = ps.scale[:, t] * ps.scale[:, s]
                    if ps.shared:
                        op1, op2 = ps.ops[t], ps.ops[s]
                        if path == "loop":
                            blk = ele_matrices_loop(op1, op2, c, ps.weights, scale)
                        else:
                            blk = ele_matrices(op1, op2, c, ps.weights, scale)
                    else:
                        op1, op2 = ps.ops[:, t], ps.ops[:, s]
                        if path == "loop":
                            blk = np.stack([compute_ele_matrix_loop(op1[e], op2[e], c[e], ps.weights[e], scale[e])
                                            for e in range(E)])
                        else:
                            blk = ele_matrices(op1, op2, c, ps.weights, scale)
                    K[:, :, i, :, j] += blk
    return K


@dataclass
class GlobalSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    nf: int
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def dof(self, node_global, fld):
        return np.asarray(node_global) * self.nf + fld


class Assembler:
    """Assembles a :class:`PointwiseForm` over a :class:`Discretization`.

    ``hook(kind, elements)`` is called for each batch in visiting order.
    """

    def __init__(self, disc, form, order="dependent-first", chunk=CHUNK, path="gemm", hook=None):
        if path not in ("gemm", "loop"):
            raise ValueError("path must be 'gemm' or 'loop'")
        self.disc = disc
        self.form = form
        self.nf = form.nf
        self.order = order
        self.chunk = chunk
        self.path = path
        self.hook = hook
        self.channels = [VAL, DX, DY, DZ] + ([LAP] if disc.bf > 1 else [])
        nf = self.nf
        self.Chat = sp.kron(disc.nodemap.constraint, sp.identity(nf), format="csr")

    def _batches(self):
        els = self.disc.order(self.order)
        for a in range(0, els.size, self.chunk):
            yield els[a:a + self.chunk]

    def _sets(self, batch):
        d = self.disc
        for ps in d.volume_sets(batch):
            yield ps
        if hasattr(self.form, "surface") and type(self.form).surface is not PointwiseForm.surface:
            for ps in d.surface_sets(batch):
                yield ps

    def _correct(self, ps, r=None, K=None):
        """Apply ``M_e^T (.) M_e`` on elements with hanging slots."""
        d = self.disc
        k = d._mslot[ps.elements]
        sel = np.flatnonzero(k >= 0)
        if sel.size == 0:
            return r, K
        M = d.corrections.matrices[k[sel]]
        if r is not None:
            r[sel] = np.einsum("eab,eai->ebi", M, r[sel])
        if K is not None:
            K[sel] = np.einsum("eab,eaicj,ecd->ebidj", M, K[sel], M, optimize=True)
        return r, K

    def _scatter_vec(self, out, ps, r):
        nf = self.nf
        dof = self.disc.dofs_e[ps.elements][:, :, None] * nf + np.arange(nf)
        out += np.bincount(dof.ravel(), weights=r.ravel(), minlength=out.size)

    def _scatter_mat(self, ps, K):
        nf = self.nf
        E, n = K.shape[:2]
        dof = (self.disc.dofs_e[ps.elements][:, :, None] * nf + np.arange(nf)).reshape(E, n * nf)
        rows = np.repeat(dof, n * nf, axis=1).ravel()
        cols = np.tile(dof, (1, n * nf)).ravel()
        size = self.disc.nodemap.n_nodes * nf
        return sp.csr_matrix((K.reshape(-1), (rows, cols)), shape=(size, size))

    def _states(self, ps, Ue, Pe):
        E, q = ps.shape
        V = self.disc.interpolate(ps, Ue[ps.elements]).reshape(E * q, self.nf, NOPS)
        prev = None if Pe is None else self.disc.interpolate(ps, Pe[ps.elements])
        return V, self.disc.point_data(ps, prev)

    def residual(self, U, prev=None):
        d = self.disc
        nf = self.nf
        Ue = d.expand(U, nf)
        Pe = None if prev is None else d.expand(prev, nf)
        out = np.zeros(d.nodemap.n_nodes * nf)
        for batch in self._batches():
            if self.hook:
                self.hook("residual", batch)
            for ps in self._sets(batch):
                V, pts = self._states(ps, Ue, Pe)
                S, F = _kernel(self.form, ps, V, pts)
                r = _residual_block(ps, np.real(S), np.real(F))
                r, _ = self._correct(ps, r=r)
                self._scatter_vec(out, ps, r)
        return self.Chat.T @ out

    def linearize(self, U, prev=None, with_residual=True):
        """Jacobian (global CSR) and residual at ``U``."""
        d = self.disc
        nf = self.nf
        Ue = d.expand(U, nf)
        Pe = None if prev is None else d.expand(prev, nf)
        size = d.nodemap.n_nodes * nf
        out = np.zeros(size)
        Kn = sp.csr_matrix((size, size))
        for batch in self._batches():
            if self.hook:
                self.hook("matrix", batch)
            for ps in self._sets(batch):
                V, pts = self._states(ps, Ue, Pe)
                S, F, dS, dF = _linearize(self.form, ps, V, pts, self.channels)
                K = _matrix_block(ps, dS, dF, nf, self.channels, self.path)
                r = _residual_block(ps, S, F) if with_residual else None
                r, K = self._correct(ps, r=r, K=K)
                Kn = Kn + self._scatter_mat(ps, K)
                if with_residual:
                    self._scatter_vec(out, ps, r)
        C = self.Chat
        J = (C.T @ Kn @ C).tocsr()
        J.sum_duplicates()
        return J, (C.T @ out if with_residual else None)

    def element_matrices(self, U=None, elements=None):
        """Uncorrected element Jacobians of regular elements (benchmark helper)."""
        d = self.disc
        nf = self.nf
        U = np.zeros(d.n_global * nf) if U is None else U
        Ue = d.expand(U, nf)
        elements = d.order("sfc") if elements is None else elements
        blocks = []
        for ps in d.volume_sets(elements):
            V, pts = self._states(ps, Ue, None)
            _, _, dS, dF = _linearize(self.form, ps, V, pts, self.channels)
            blocks.append(_matrix_block(ps, dS, dF, nf, self.channels, self.path))
        return blocks


def pin_rows(J, R, dofs, values=None):
    """Replace rows ``dofs`` by identity rows and set ``R[dofs] = values`` (default 0)."""
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.zeros(dofs.size) if values is None else np.broadcast_to(values, dofs.shape)
    # with repeated dofs the last value wins
    _, first = np.unique(dofs[::-1], return_index=True)
    last = dofs.size - 1 - first
    dofs, values = dofs[last], values[last]
    keep = np.ones(J.shape[0])
    keep[dofs] = 0.0
    eye = np.zeros(J.shape[0])
    eye[dofs] = 1.0
    J = (sp.diags(keep) @ J + sp.diags(eye)).tocsr()
    J.eliminate_zeros()
    R = np.array(R, dtype=float)
    R[dofs] = values
    return J, R


def empty_rows(J, tol=0.0):
    """Dofs whose matrix row is entirely zero (no quadrature touches them)."""
    a = abs(J).sum(axis=1).A1
    return np.flatnonzero(a <= tol)


def write_matrix_market(path, matrix, comment=""):
    scipy.io.mmwrite(path, sp.coo_matrix(matrix), comment=comment)


def read_matrix_market(path):
    return sp.csr_matrix(scipy.io.mmread(path))


def l2_error(disc, U, exact, nf=1, fields=None, ngp=None):
    """L2 norm of ``u_h - exact`` over the fluid quadrature, per field.

    ``exact(x)`` returns (P, nf). A richer Gauss rule (``bf + 2`` by default)
    is used on regular elements.
    """
    ngp = disc.bf + 2 if ngp is None else ngp
    fine = Discretization(disc.tree, disc.nodemap, disc.markers, disc.plan, ngp=ngp)
    fields = list(range(nf)) if fields is None else list(fields)
    Ue = fine.expand(U, nf)
    acc = np.zeros(len(fields))
    for ps in fine.volume_sets(fine.order("sfc")):
        V = fine.interpolate(ps, Ue[ps.elements])[..., VAL]
        E, q = ps.shape
        ref = np.asarray(exact(ps.x.reshape(-1, 3))).reshape(E, q, -1)
        diff = (V - ref)[..., fields]
        acc += np.einsum("eq,eqf->f", ps.weights, diff ** 2)
    return np.sqrt(acc)
