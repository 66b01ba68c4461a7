"""End-to-end simulation driver and the benchmark studies."""
import csv
import json
import logging
import os
import time

import numpy as np

from ..classify import Marker, build_background_index, fluid_volume
from ..classify import _corner_lattice, classify_in_leaves, csr_gather
from ..fem.assembly import Assembler, _linearize, _matrix_block
from ..geometry import Aabb, icosphere, load_stl, normal_votes, ray_trace_inside_many
from ..octree import RefinementSpec, build, uniform
from ..partition import (WeightModel, element_weights, equal_count_partition, imbalance_stats,
                         tag_elements, weighted_sfc_partition)
from ..ns import (DirichletBC, FlowProblem, ForceHistory, NavierStokesForm, SolverConfig, Stage,
                  boundary_nodes, surface_forces)
from ..ns.weakbc import check_penalty
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dumps
from .pipeline import build_mesh
from .vtu import nodal_fields, write_vtu

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# setup helpers

def make_surface(cfg):
    g = cfg.geometry
    if g.body == "none":
        return None
    if g.body == "sphere":
        return icosphere(g.body_level, 0.5 * g.body_diameter, g.body_center)
    if g.body == "stl":
        if not g.stl:
            raise RunError("geometry.body = 'stl' needs geometry.stl")
        return load_stl(g.stl).transformed(scale=g.scale, translation=np.asarray(g.translate, float))
    raise RunError(f"unknown body kind {g.body!r}")


def domain_box(cfg):
    lo = np.asarray(cfg.mesh.domain_min, float)
    hi = np.asarray(cfg.mesh.domain_max, float)
    if not np.allclose(hi - lo, (hi - lo)[0]):
        raise RunError("the octree domain must be a cube")
    return Aabb(lo, hi)


def refinement_spec(cfg, surface):
    m = cfg.mesh
    regions = []
    if m.wake_min and m.wake_max:
        regions.append((Aabb(np.asarray(m.wake_min, float), np.asarray(m.wake_max, float)), m.R_wake))
    kw = {}
    if m.bdy_min and m.bdy_max:
        regions.append((Aabb(np.asarray(m.bdy_min, float), np.asarray(m.bdy_max, float)), m.R_bdy))
    elif surface is not None:
        kw = dict(surface=surface, surface_level=m.R_bdy, surface_distance=m.bdy_distance)
    return RefinementSpec(domain_box(cfg), m.R_bkg, regions=regions, curve=m.curve, **kw)


def solver_config(cfg):
    s = cfg.solver
    return SolverConfig(newton_rtol=s.newton_rtol, newton_atol=s.newton_atol,
                        max_newton=s.max_newton, krylov=s.krylov, precond=s.precond,
                        krylov_tol=s.krylov_tol)


def frontal_area(surface, axis=0):
    """Projected area of a closed surface on the plane normal to ``axis``."""
    return 0.5 * float(np.sum(surface.areas * np.abs(surface.normals[:, axis])))


def flow_bcs(disc, case, speed=1.0):
    faces = boundary_nodes(disc)
    if case == "channel":
        inflow = np.unique(np.concatenate([faces[k] for k in ("xmin", "ymin", "ymax", "zmin", "zmax")]))
        bcs = [DirichletBC(faces["xmax"], 3, 0.0)]
        bcs += [DirichletBC(inflow, i, speed if i == 0 else 0.0) for i in range(3)]
        return bcs
    if case == "cavity":
        walls = np.unique(np.concatenate(list(faces.values())))
        bcs = [DirichletBC(walls, i, 0.0) for i in range(3)]
        bcs.append(DirichletBC(faces["zmax"], 0, speed))
        corner = np.intersect1d(np.intersect1d(faces["xmin"], faces["ymin"]), faces["zmin"])
        bcs.append(DirichletBC(corner[:1], 3, 0.0))
        return bcs
    raise RunError(f"unknown flow case {case!r}")


def stages(cfg):
    f = cfg.flow
    out = [Stage(int(s), float(dt), float(re)) for s, dt, re in f.ramp]
    n = int(round(f.T_final / f.dt))
    if n:
        out.append(Stage(n, f.dt, f.Re))
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def _outdir(cfg, outdir):
    out = outdir or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.used"), "w") as fh:
        fh.write(dumps(cfg))
    return out


# --------------------------------------------------------------------------
# simulation

def prepare(cfg):
    """Mesh, partition and discretization for ``cfg``."""
    surface = make_surface(cfg)
    spec = refinement_spec(cfg, surface)
    mesh = build_mesh(spec, cfg.fem.BasisFunction, surface,
                      max_split=cfg.fem.gp_max_splitting, adaptive=cfg.adaptive,
                      surface_rule=cfg.fem.surface_rule, split_rule=cfg.fem.split_rule)
    model = WeightModel.for_basis(cfg.fem.BasisFunction, cfg.partition.RatioWeight)
    weights = element_weights(mesh.markers, mesh.plan, model)
    parts = max(1, min(cfg.partition.parts, mesh.tree.n_leaves))
    result = weighted_sfc_partition(weights, parts)
    tags = tag_elements(mesh.tree, result, mesh.nodemap)
    disc = mesh.discretization(tags)
    return surface, mesh, result, weights, disc


def run_simulation(cfg, outdir=None):
    """Run the configured case; returns a summary dict (also written as JSON)."""
    out = _outdir(cfg, outdir)
    t_start = time.perf_counter()
    surface, mesh, part, weights, disc = prepare(cfg)
    f = cfg.flow
    form = NavierStokesForm(f.Re, theta=f.theta, c_b=f.C_b)
    problem = FlowProblem(disc, form, flow_bcs(disc, f.case, f.U_inf), solver_config(cfg))
    nf = form.nf
    digest = cfg.digest()
    cell_data = {"marker": mesh.markers.astype(np.int8), "weight": weights,
                 "part": part.part_of().astype(np.int32),
                 "level": mesh.tree.levels.astype(np.int32)}
    vtu_kw = dict(mode=cfg.output.vtu_format, compress=cfg.output.compress)

    def dump(tag, U):
        p = os.path.join(out, f"fields_{tag}.vtu")
        write_vtu(p, disc.nodemap, nodal_fields(disc.nodemap, U, nf), cell_data, **vtu_kw)
        return p

    U = problem.apply(np.zeros(problem.n_dofs))
    t, step = 0.0, 0
    if cfg.output.restart:
        ck = load_checkpoint(cfg.output.restart)
        if not ck.matches(mesh.tree):
            raise RunError("checkpoint mesh does not match the configured mesh")
        U, t, step = ck.state, ck.time, ck.step
    summary = dict(leaves=int(mesh.tree.n_leaves), dofs=int(problem.n_dofs),
                   intercepted=int(np.sum(mesh.markers == Marker.INTERCEPTED)),
                   imbalance=part.imbalance(), mesh_timings=mesh.timings)
    if surface is not None and mesh.plan is not None:
        summary["penalty_below_4"] = check_penalty(f.C_b, f.Re, mesh.h_b[mesh.plan.elements])
    history = None
    if surface is not None:
        history = ForceHistory(os.path.join(out, "forces.csv"), speed=f.U_inf, area=frontal_area(surface))

    sched = stages(cfg)
    if f.steady:
        U, info = problem.steady(U)
        if history:
            cd, cl = history.append(0.0, surface_forces(problem.assembler, U))
            summary.update(C_d=cd, C_l=cl)
        summary["newton_iterations"] = info.iterations
        dump("steady", U)
    elif not sched or all(s.steps == 0 for s in sched):
        dump("mesh", U)
    else:
        total = sum(s.steps for s in sched)
        k = 0
        for st in sched:
            form.re = float(st.re) if st.re is not None else form.re
            for _ in range(st.steps):
                k += 1
                if k <= step:
                    continue
                prev = U
                U, info = problem.time_step(U, t, st.dt)
                t = t + st.dt
                step = k
                if history:
                    cd, cl = history.append(t, surface_forces(problem.assembler, U, prev))
                    summary.update(C_d=cd, C_l=cl)
                if cfg.output.vtu_every and step % cfg.output.vtu_every == 0:
                    dump(f"{step:06d}", U)
                if cfg.output.checkpoint_every and step % cfg.output.checkpoint_every == 0:
                    save_checkpoint(os.path.join(out, f"checkpoint_{step:06d}.npz"), U, t, step,
                                    mesh.tree, digest)
                log.info("step %d/%d t=%.4g newton=%d", step, total, t, info.iterations)
        dump("final", U)
        save_checkpoint(os.path.join(out, "checkpoint_final.npz"), U, t, step, mesh.tree, digest)
    summary.update(time=t, steps=step, wall=time.perf_counter() - t_start)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
    np.save(os.path.join(out, "state_final.npy"), U)
    return summary


# --------------------------------------------------------------------------
# benchmarks

def bench_inout(cfg, outdir=None):
    """Normal test with fallback versus pure ray tracing on several grids."""
    out = _outdir(cfg, outdir)
    surface = make_surface(cfg)
    if surface is None:
        raise RunError("bench-inout needs an immersed body")
    bb = surface.bbox
    side = 1.25 * float((bb.hi - bb.lo).max())
    box = Aabb(bb.center - 0.5 * side, bb.center + 0.5 * side)
    rows = []
    for n in cfg.bench.grids:
        level = int(round(np.log2(n)))
        if 1 << level != n:
            raise RunError(f"grid size {n} is not a power of two")
        # only octants near the surface reach the grid resolution
        tree = build(RefinementSpec(box, min(level, 3), surface=surface, surface_level=level))
        index = build_background_index(tree, surface)
        busy = np.flatnonzero((np.diff(index.win_ptr) > 0) & (tree.levels == level))
        lat = np.unique(_corner_lattice(tree)[busy].reshape(-1, 3), axis=0)
        cells = np.minimum(lat, (1 << tree.max_level) - 1)
        leaves = tree.locate_cells(cells)
        pts = tree.box.lo + lat * tree.cell
        t0 = time.perf_counter()
        inside, fb = classify_in_leaves(pts, leaves, index, surface)
        t_comb = time.perf_counter() - t0
        t0 = time.perf_counter()
        ptr, tris = csr_gather(index.win_ptr, index.win_tris, leaves)
        normal_votes(pts, ptr, tris, surface)
        t_norm = time.perf_counter() - t0
        t0 = time.perf_counter()
        if fb.any():
            ray_trace_inside_many(pts[fb], surface)
        t_fb = time.perf_counter() - t0
        t0 = time.perf_counter()
        ref = ray_trace_inside_many(pts, surface)
        t_ray = time.perf_counter() - t0
        if not np.array_equal(ref, inside):
            raise RunError(f"in/out mismatch against ray tracing on the {n}^3 grid")
        p_f = float(fb.mean()) if fb.size else 0.0
        rows.append([f"{n}^3", pts.shape[0], 1.0 - p_f, t_norm, p_f, t_fb, t_ray, t_ray / t_comb])
    _write_csv(os.path.join(out, "bench_inout.csv"),
               ["grid", "points", "P_s", "normal_time", "P_f", "fallback_time", "raytrace_time",
                "speedup"], rows)
    return rows


def _cavity_sets(level, bf, re=100.0):
    from ..fem.assembly import Discretization
    from ..octree import enumerate_nodes
    tree = uniform(Aabb(np.zeros(3), np.ones(3)), level)
    disc = Discretization(tree, enumerate_nodes(tree, bf))
    form = NavierStokesForm(re)
    asm = Assembler(disc, form)
    problem = FlowProblem(disc, form, flow_bcs(disc, "cavity", 1.0))
    U = problem.apply(np.zeros(problem.n_dofs))
    Ue = disc.expand(U, form.nf)
    (ps,) = disc.volume_sets(disc.order("sfc"))
    V, pts = asm._states(ps, Ue, None)
    S, F, dS, dF = _linearize(form, ps, V, pts, asm.channels)
    return ps, dS, dF, asm


def bench_assembly(cfg, outdir=None):
    """Elemental Jacobian blocks by Gauss-point loop versus batched GEMM."""
    from .. import kernels
    out = _outdir(cfg, outdir)
    rows = []
    for bf in (1, 2):
        ps, dS, dF, asm = _cavity_sets(cfg.bench.cavity_level, bf, cfg.flow.Re)
        times = {}
        mats = {}
        for path in ("loop", "gemm"):
            best = np.inf
            for _ in range(max(1, cfg.bench.repeats)):
                t0 = time.perf_counter()
                mats[path] = _matrix_block(ps, dS, dF, 4, asm.channels, path)
                best = min(best, time.perf_counter() - t0)
            times[path] = best
        diff = float(np.abs(mats["loop"] - mats["gemm"]).max() / np.abs(mats["gemm"]).max())
        rows.append([bf, ps.elements.size, times["loop"], times["gemm"],
                     times["loop"] / times["gemm"], diff, kernels.BACKEND])
    _write_csv(os.path.join(out, "bench_assembly.csv"),
               ["bf", "elements", "loop_time", "gemm_time", "speedup", "max_rel_diff", "backend"], rows)
    return rows


def bench_partition(cfg, outdir=None):
    """Weighted versus equal-count SFC partitions of the classified mesh."""
    out = _outdir(cfg, outdir)
    surface = make_surface(cfg)
    mesh = build_mesh(refinement_spec(cfg, surface), cfg.fem.BasisFunction, surface,
                      max_split=cfg.fem.gp_max_splitting, adaptive=cfg.adaptive,
                      surface_rule=cfg.fem.surface_rule, split_rule=cfg.fem.split_rule)
    model = WeightModel.for_basis(cfg.fem.BasisFunction, cfg.partition.RatioWeight)
    w = element_weights(mesh.markers, mesh.plan, model)
    rows = []
    for p in cfg.partition.parts_list:
        wr = weighted_sfc_partition(w, p)
        er = equal_count_partition(w.size, p, w)
        rows.append([p, wr.imbalance(), er.imbalance()])
        imbalance_stats(wr).to_csv(os.path.join(out, f"partition_weighted_p{p}.csv"), wr)
        imbalance_stats(er).to_csv(os.path.join(out, f"partition_equal_p{p}.csv"), er)
    _write_csv(os.path.join(out, "bench_partition.csv"),
               ["parts", "weighted_imbalance", "equal_count_imbalance"], rows)
    return rows


def bench_quadrature(cfg, outdir=None):
    """Fluid-volume error of the immersed quadrature versus ``gp_max_splitting``."""
    out = _outdir(cfg, outdir)
    surface = make_surface(cfg)
    if surface is None:
        raise RunError("bench-quadrature needs an immersed body")
    spec = refinement_spec(cfg, surface)
    box = spec.box
    body = np.pi / 6.0 * cfg.geometry.body_diameter ** 3 if cfg.geometry.body == "sphere" else surface.volume()
    exact = float(np.prod(box.hi - box.lo)) - body
    rows = []
    for ms in cfg.bench.levels:
        t0 = time.perf_counter()
        mesh = build_mesh(spec, cfg.fem.BasisFunction, surface, max_split=ms,
                          surface_rule=cfg.fem.surface_rule, split_rule=cfg.fem.split_rule)
        vol = fluid_volume(mesh.tree, mesh.markers, mesh.plan)
        rows.append([ms, vol, exact, abs(vol - exact), abs(vol - exact) / body,
                     int(mesh.plan.n_volume.sum()), time.perf_counter() - t0])
    _write_csv(os.path.join(out, "bench_quadrature.csv"),
               ["max_split", "fluid_volume", "exact", "abs_error", "rel_error_body", "volume_points",
                "time"], rows)
    return rows
