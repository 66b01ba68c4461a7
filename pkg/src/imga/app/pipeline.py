"""Mesh pipeline: geometry -> octree -> classification -> quadrature -> FEM data."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..classify import Marker, build_background_index, build_plans, mark_elements, mark_nodes
from ..fem.assembly import Discretization
from ..octree import balance_2to1, build, enumerate_nodes
from ..ns.weakbc import compute_h_b

log = logging.getLogger(__name__)


@dataclass
class ImmersedMesh:
    tree: object
    nodemap: object
    markers: np.ndarray
    index: object = None
    plan: object = None
    flags: object = None
    h_b: np.ndarray = None
    timings: dict = field(default_factory=dict)

    def discretization(self, tags=None, ngp=None):
        inactive = None if self.flags is None else self.flags.inactive_global
        return Discretization(self.tree, self.nodemap, self.markers, self.plan, tags=tags,
                              ngp=ngp, inactive=inactive, h_b=self.h_b)


def build_mesh(spec, bf=1, surface=None, max_split=2, ngp=None, surface_rule="7pt",
               split_rule="surface", adaptive=True):
    """Build every mesh artifact for ``spec``; ``surface`` is the immersed body.

    With ``adaptive=False`` intercepted elements keep the plain Gauss rule
    filtered by in/out (``max_split = 0``).
    """
    ngp = bf + 1 if ngp is None else ngp
    tm = {}
    t0 = time.perf_counter()
    tree = balance_2to1(build(spec))
    tm["octree"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    nodemap = enumerate_nodes(tree, bf)
    tm["nodes"] = time.perf_counter() - t0
    if surface is None:
        markers = np.full(tree.n_leaves, Marker.OUT, dtype=np.int8)
        return ImmersedMesh(tree, nodemap, markers, timings=tm)
    t0 = time.perf_counter()
    index = build_background_index(tree, surface)
    markers = mark_elements(tree, index, surface)
    flags = mark_nodes(tree, markers, nodemap, index, surface)
    tm["classify"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    plan = build_plans(tree, markers, index, surface, max_split if adaptive else 0, ngp,
                       surface_rule, split_rule)
    tm["quadrature"] = time.perf_counter() - t0
    h_b = compute_h_b(tree, nodemap, plan.elements, flags.inside, index, surface)
    log.info("mesh: %d leaves, %d nodes, %d intercepted", tree.n_leaves, nodemap.n_global,
             plan.elements.size)
    return ImmersedMesh(tree, nodemap, markers, index, plan, flags, h_b, tm)
