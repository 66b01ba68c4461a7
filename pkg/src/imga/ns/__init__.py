"""Incompressible flow: VMS form, weak boundary conditions, solvers and forces."""
from .stabilization import fine_scale, stabilization_params, tau_bar, tau_c, tau_m
from .vms import NavierStokesForm, stokes_form
from .weakbc import check_penalty, compute_h_b
from .forces import ForceHistory, Forces, surface_forces
from .solver import (DirichletBC, FlowProblem, NewtonDivergence, SolverConfig, Stage,
                     boundary_nodes, run, solve_linear)

__all__ = [
    "fine_scale", "stabilization_params", "tau_bar", "tau_c", "tau_m",
    "NavierStokesForm", "stokes_form", "check_penalty", "compute_h_b",
    "ForceHistory", "Forces", "surface_forces",
    "DirichletBC", "FlowProblem", "NewtonDivergence", "SolverConfig", "Stage",
    "boundary_nodes", "run", "solve_linear",
]
