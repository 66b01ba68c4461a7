"""Octree-based immersogeometric flow analysis."""
import os

# thread count for the BLAS/LAPACK backends; must be set before numpy loads
THREADS_ENV = "IMGA_THREADS"
if os.environ.get(THREADS_ENV):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ[THREADS_ENV])

__version__ = "0.1.0"
