"""Backend selection for the hot loops.

The compiled extension is used when importable; ``IMGA_PURE_PYTHON=1`` forces
the numpy fallback.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

fallback = _kernels_py
compiled = None

if os.environ.get("IMGA_PURE_PYTHON", "0") != "1":
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

active = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "numpy"

ray_cast = active.ray_cast
ray_cast_binned = active.ray_cast_binned
normal_votes = active.normal_votes
tri_box_overlap = active.tri_box_overlap
gauss_loop_matrix = active.gauss_loop_matrix
gauss_loop_batch = active.gauss_loop_batch
