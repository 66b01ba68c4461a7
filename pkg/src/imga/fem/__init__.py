"""Finite element machinery: bases, elemental products, hanging corrections, assembly."""
from .basis import ReferenceBasis, evaluate, interpolate_to_gauss, precompute_basis
from .elemental import compute_ele_matrix, compute_ele_matrix_loop, ele_matrices, ele_matrices_loop
from .hanging import HangingCorrections, compute_hanging_corrections
from .assembly import (Assembler, AssemblyError, Discretization, GlobalSystem, PointwiseForm,
                       l2_error, pin_rows, write_matrix_market, read_matrix_market)
from .forms import PoissonForm

__all__ = [
    "ReferenceBasis", "evaluate", "interpolate_to_gauss", "precompute_basis",
    "compute_ele_matrix", "compute_ele_matrix_loop", "ele_matrices", "ele_matrices_loop",
    "HangingCorrections", "compute_hanging_corrections",
    "Assembler", "AssemblyError", "Discretization", "GlobalSystem", "PointwiseForm",
    "l2_error", "pin_rows", "write_matrix_market", "read_matrix_market", "PoissonForm",
]
