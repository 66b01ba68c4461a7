"""Elemental matrices as ``scale * op1 diag(gp * W) op2^T``.

``op1`` and ``op2`` are basis tables laid out as (basis function, point).
The GEMM path follows three stages: weight the point values (O(n)), scale
the columns of ``op2`` (O(n^2)), then one matrix product (O(n^3)). The
reference path accumulates one rank-one update per point.
"""
import numpy as np

from .. import kernels


def _check(op1, op2, gp, w):
    if op1.shape[1] != op2.shape[1] or gp.shape[-1] != op1.shape[1] or w.shape[-1] != op1.shape[1]:
        raise ValueError(f"shape mismatch: op1 {op1.shape}, op2 {op2.shape}, gp {gp.shape}, W {w.shape}")


def compute_ele_matrix(op1, op2, gp, weights, scale=1.0):
    op1, op2 = np.asarray(op1, float), np.asarray(op2, float)
    gp, weights = np.asarray(gp, float), np.asarray(weights, float)
    _check(op1, op2, gp, weights)
    gpw = gp * weights                 # O(n)
    m = op2 * gpw[None, :]             # O(n^2)
    return scale * (op1 @ m.T)         # O(n^3)


def compute_ele_matrix_loop(op1, op2, gp, weights, scale=1.0):
    op1, op2 = np.asarray(op1, float), np.asarray(op2, float)
    gp, weights = np.asarray(gp, float), np.asarray(weights, float)
    _check(op1, op2, gp, weights)
    return scale * kernels.gauss_loop_matrix(op1, op2, gp * weights)


def ele_matrices(op1, op2, gp, weights, scale=None):
    """Batched GEMM path.

    ``gp`` and ``weights`` are (E, q). ``op1``/``op2`` are either shared
    (n, q) tables or per-element (E, n, q) stacks. Returns (E, n1, n2).
    """
    gpw = gp * weights
    if op2.ndim == 2:
        m = op2[None] * gpw[:, None, :]
    else:
        m = op2 * gpw[:, None, :]
    if op1.ndim == 2:
        # one large product: (n1, q) @ (q, E * n2)
        E, n2, q = m.shape
        big = op1 @ m.transpose(2, 0, 1).reshape(q, E * n2)
        out = big.reshape(op1.shape[0], E, n2).transpose(1, 0, 2)
    else:
        out = np.matmul(op1, m.transpose(0, 2, 1))
    if scale is not None:
        out = out * np.asarray(scale, float).reshape(-1, 1, 1)
    return out


def ele_matrices_loop(op1, op2, gp, weights, scale=None):
    """Batched Gauss-point loop (shared operator tables only)."""
    if op1.ndim != 2 or op2.ndim != 2:
        raise ValueError("the loop path expects shared operator tables")
    out = kernels.gauss_loop_batch(op1, op2, np.ascontiguousarray(gp * weights))
    if scale is not None:
        out = out * np.asarray(scale, float).reshape(-1, 1, 1)
    return out
