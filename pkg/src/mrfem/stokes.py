"""Space-time Taylor-Hood solver for time-dependent Stokes flow.

Velocity components live in continuous Q_pv (pv >= 2), pressure in Q_{pv-1},
both discretized dG(r) in time on one-slab systems that march forward through
the jump trace. The multirate algorithm drives this with r = 0 (one backward
Euler-like system per flow slab); higher r is supported for convergence
studies. The weak pressure coupling is -(p, div psi) - (div v, chi) with the
body force derived under the same convention, so manufactured benchmarks are
sign-consistent.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .dofs import (ConstraintSet, boundary_faces_cached, get_handler,
                   hanging_constraints)
from .fem import time_cell_blocks
from .fields import FlowSolution, SpaceField, quad_batch
from .linsys import SolveReport, condensed_rhs, condense
from .slabs import Slab
from .tensor import COOBuilder, SlabDoFMap, extend_constraints, scatter_local

__all__ = ["FlowCoefficients", "assemble_flow_slab", "fix_pressure_nullspace",
           "solve_flow"]


@dataclasses.dataclass
class FlowCoefficients:
    """Data of the Stokes problem.

    ``forcing(x, y, t)`` and ``dirichlet[color](x, y, t)`` return component
    pairs broadcast over the coordinate arrays; ``initial(x, y)`` likewise.
    Boundary colors absent from ``dirichlet`` are natural (do-nothing)
    boundaries. ``pressure_mode`` must be "pin-and-shift" for enclosed flows
    (every boundary Dirichlet) and "none" when an outflow boundary fixes the
    pressure level.
    """

    nu: float
    forcing: Callable | None
    dirichlet: dict[str, Callable]
    initial: Callable
    pressure_mode: str = "pin-and-shift"

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.pressure_mode not in ("pin-and-shift", "none"):
            raise ValueError(f"unknown pressure mode {self.pressure_mode!r}")


def _mixed_cell_dofs(mesh, vh, ph, batch_v, batch_p):
    """Per-cell global ids in the [vx | vy | p] layout, (nc, L)."""
    vdofs = batch_v.cell_dof_rows(vh)
    pdofs = batch_p.cell_dof_rows(ph)
    nv = vh.n_dofs
    return np.concatenate([vdofs, nv + vdofs, 2 * nv + pdofs], axis=1)


def _stokes_local(batch_v, batch_p, nu: float):
    """Per-cell mass and stiffness blocks of the mixed operator.

    Returns (Mfull, A) of shape (nc, L, L) with L = 2*nvl + npl: Mfull holds
    the velocity mass (pressure slots zero), A the viscous + pressure-gradient
    + divergence couplings.
    """
    w = batch_v.wphys
    phi, gx, gy = batch_v.phi, batch_v.gx, batch_v.gy
    q = batch_p.phi
    nc = len(batch_v.cells)
    nvl = phi.shape[1]
    npl = q.shape[1]
    L = 2 * nvl + npl
    Mv = np.einsum("cq,qi,qj->cij", w, phi, phi)
    Axx = nu * (2.0 * np.einsum("cq,cqi,cqj->cij", w, gx, gx)
                + np.einsum("cq,cqi,cqj->cij", w, gy, gy))
    Ayy = nu * (2.0 * np.einsum("cq,cqi,cqj->cij", w, gy, gy)
                + np.einsum("cq,cqi,cqj->cij", w, gx, gx))
    Axy = nu * np.einsum("cq,cqi,cqj->cij", w, gy, gx)  # test x, trial y
    Bx = -np.einsum("cq,cqi,qj->cij", w, gx, q)         # -(p, dx psi_x)
    By = -np.einsum("cq,cqi,qj->cij", w, gy, q)
    Mfull = np.zeros((nc, L, L))
    Mfull[:, :nvl, :nvl] = Mv
    Mfull[:, nvl:2 * nvl, nvl:2 * nvl] = Mv
    A = np.zeros((nc, L, L))
    A[:, :nvl, :nvl] = Axx
    A[:, :nvl, nvl:2 * nvl] = Axy
    A[:, nvl:2 * nvl, :nvl] = np.swapaxes(Axy, 1, 2)
    A[:, nvl:2 * nvl, nvl:2 * nvl] = Ayy
    A[:, :nvl, 2 * nvl:] = Bx
    A[:, nvl:2 * nvl, 2 * nvl:] = By
    # divergence rows mirror the pressure-gradient columns
    A[:, 2 * nvl:, :nvl] = np.swapaxes(Bx, 1, 2)
    A[:, 2 * nvl:, nvl:2 * nvl] = np.swapaxes(By, 1, 2)
    return Mfull, A


def assemble_flow_slab(slab: Slab, coeffs: FlowCoefficients,
                       prev_velocity=None):
    """Space-time system of one flow slab (unconstrained).

    ``prev_velocity`` is a pair of SpaceFields (end-of-slab trace) or None for
    a zero/initial-data start handled by the caller via coefficient vectors;
    pass the interpolated initial velocity as fields as well. Returns
    ``(A, rhs, dofmap, vh, ph)`` with the jump trace of the first temporal
    cell already folded into ``rhs``.
    """
    mesh = slab.mesh
    pv = slab.space_degree
    vh = get_handler(mesh, pv)
    ph = get_handler(mesh, pv - 1)
    nv, npd = vh.n_dofs, ph.n_dofs
    n_space = 2 * nv + npd
    dm = SlabDoFMap(n_space, slab.n_cells, slab.time_degree, slab.dof_times())
    tb = time_cell_blocks(slab.time_degree)
    r1 = slab.time_degree + 1

    batch_v = quad_batch(mesh, pv, pv + 1)
    batch_p = quad_batch(mesh, pv - 1, pv + 1)
    batch_f = quad_batch(mesh, pv, pv + 2)
    dofs = _mixed_cell_dofs(mesh, vh, ph, batch_v, batch_p)
    Mfull, A = _stokes_local(batch_v, batch_p, coeffs.nu)
    nc, L = dofs.shape
    nvl = batch_v.phi.shape[1]

    builder = COOBuilder(dm.n_total, "primal")
    rhs = np.zeros(dm.n_total)
    face = np.outer(tb.theta_left, tb.theta_left)
    vprev_loc = None
    if prev_velocity is not None:
        fx, fy = prev_velocity
        vrows = batch_v.cell_dof_rows(vh)
        vprev_loc = np.concatenate([fx.coeffs[vrows], fy.coeffs[vrows]], axis=1)

    for k in range(slab.n_cells):
        ta, tk = slab.cell(k)
        tau = tk - ta
        tids = dm.time_ids_of_cell(k)
        # temporal derivative + left-face diagonal on the velocity mass,
        # temporal-mass-weighted stationary operator on the diagonal nodes
        loc = np.einsum("ab,cij->caibj", tb.dt + face, Mfull)
        loc += np.einsum("a,ab,cij->caibj", tau * tb.weights, np.eye(r1), A)
        gids = (dofs[:, None, :] + n_space * tids[None, :, None]).reshape(nc, r1 * L)
        scatter_local(builder, loc.reshape(nc, r1 * L, r1 * L), gids, gids)
        if k > 0:
            prev_ids = dm.time_ids_of_cell(k - 1)
            cpl = -np.einsum("a,b,cij->caibj", tb.theta_left, tb.theta_right, Mfull)
            gprev = (dofs[:, None, :] + n_space * prev_ids[None, :, None]).reshape(nc, r1 * L)
            scatter_local(builder, cpl.reshape(nc, r1 * L, r1 * L), gids, gprev)
        elif vprev_loc is not None:
            trace = np.einsum("a,cij,cj->cai", tb.theta_left,
                              Mfull[:, :2 * nvl, :2 * nvl], vprev_loc)
            np.add.at(rhs, gids.reshape(nc, r1, L)[:, :, :2 * nvl], trace)
        if coeffs.forcing is not None:
            tpts = ta + tau * tb.force_points
            load = np.zeros((nc, r1, L))
            for l, tl in enumerate(tpts):
                fx, fy = coeffs.forcing(batch_f.points[:, :, 0],
                                        batch_f.points[:, :, 1], tl)
                cx = np.einsum("cq,cq,qi->ci", batch_f.wphys,
                               np.broadcast_to(fx, batch_f.wphys.shape), batch_f.phi)
                cy = np.einsum("cq,cq,qi->ci", batch_f.wphys,
                               np.broadcast_to(fy, batch_f.wphys.shape), batch_f.phi)
                wl = tau * tb.force_weights[l] * tb.theta_force[l]
                load[:, :, :nvl] += wl[None, :, None] * cx[:, None, :]
                load[:, :, nvl:2 * nvl] += wl[None, :, None] * cy[:, None, :]
            np.add.at(rhs, gids.reshape(nc, r1, L), load)
    return builder.tocsr(), rhs, dm, vh, ph


def _flow_constraints(slab: Slab, coeffs: FlowCoefficients, vh, ph, dm: SlabDoFMap):
    """Per-temporal-dof constraint dict in the mixed [vx|vy|p] id layout."""
    mesh = slab.mesh
    nv = vh.n_dofs
    hang_v = hanging_constraints(mesh, slab.space_degree, vh)
    hang_p = hanging_constraints(mesh, slab.space_degree - 1, ph)
    sets = []
    for t in dm.time_dof_times:
        cs = ConstraintSet()
        for dof, (masters, g) in hang_v.rows.items():
            cs.add(dof, masters, g)
            cs.add(dof + nv, [(m + nv, w) for m, w in masters], g)
        for dof, (masters, g) in hang_p.rows.items():
            cs.add(dof + 2 * nv, [(m + 2 * nv, w) for m, w in masters], g)
        for c, side, color in boundary_faces_cached(mesh):
            g = coeffs.dirichlet.get(color)
            if g is None:
                continue
            for dof in vh.dofs_on_side(c, side):
                x, y = vh.node_coords[dof]
                gx, gy = g(x, y, float(t))
                cs.add(dof, [], float(gx), overwrite=True)
                cs.add(dof + nv, [], float(gy), overwrite=True)
        sets.append(cs.close())
    ext = extend_constraints(sets, dm)
    return ext


def fix_pressure_nullspace(constraints: dict, dm: SlabDoFMap, vh,
                           mode: str) -> dict:
    """Pin one pressure dof per temporal dof when the flow is enclosed.

    The pinned value is 0; the physical zero-mean normalization happens after
    the solve by subtracting the discrete mean (see solve_flow). With mode
    "none" the constraint set is returned unmodified.
    """
    if mode == "none":
        return constraints
    pin = 2 * vh.n_dofs
    for a in range(dm.n_time):
        gid = pin + a * dm.n_space
        if gid in constraints:
            raise ValueError("pressure pin dof already constrained")
        constraints[gid] = ([], 0.0)
    return constraints


def _subtract_pressure_means(mesh, ph, rows: np.ndarray, nv: int):
    """Shift each temporal dof's pressure part to zero spatial mean."""
    batch = quad_batch(mesh, ph.degree, ph.degree + 2)
    area = batch.wphys.sum()
    prows = batch.cell_dof_rows(ph)
    for a in range(rows.shape[0]):
        p = rows[a, 2 * nv:]
        vals = np.einsum("qi,ci->cq", batch.phi, p[prows])
        rows[a, 2 * nv:] -= batch.integrate(vals) / area
    return rows


def solve_flow(flow_slabs: list[Slab], coeffs: FlowCoefficients,
               method: str = "direct") -> FlowSolution:
    """March the Stokes system over the given slabs.

    Reuses one matrix factorization for runs of slabs with identical mesh and
    temporal layout (the stationary operator is time independent), so global
    convergence studies pay for a single factorization per refinement level.
    """
    sol = FlowSolution(flow_slabs)
    prev: tuple[SpaceField, SpaceField] | None = None
    cache_key = None
    cache = None
    for slab in flow_slabs:
        mesh = slab.mesh
        vh = get_handler(mesh, slab.space_degree)
        if prev is None:
            vx0, vy0 = _interpolate_pair(coeffs.initial, mesh, vh)
            prev = (vx0, vy0)
        elif prev[0].mesh.uid != mesh.uid:
            prev = (SpaceField(mesh, vh, prev[0].at(vh.node_coords)),
                    SpaceField(mesh, vh, prev[1].at(vh.node_coords)))
        A, rhs, dm, vh, ph = assemble_flow_slab(slab, coeffs, prev)
        cons = _flow_constraints(slab, coeffs, vh, ph, dm)
        cons = fix_pressure_nullspace(cons, dm, vh, coeffs.pressure_mode)
        key = (mesh.uid, slab.time_degree,
               tuple(np.round(slab.cell_lengths(), 12)))
        if cache_key != key:
            system = condense(A, rhs, cons)
            lu = spla.splu(system.matrix.tocsc())
            cache_key, cache = key, (system, lu)
        else:
            system, lu = cache
            _, lift, _ = _lift_only(dm.n_total, cons)
            system = dataclasses.replace(system, lift=lift,
                                         rhs=condensed_rhs(system, A, rhs, lift))
        y = cache[1].solve(system.rhs)
        u = system.cmat @ y + system.lift
        resid = float(np.max(np.abs(system.matrix @ y - system.rhs)))
        rows = u.reshape(dm.n_time, dm.n_space).copy()
        if coeffs.pressure_mode == "pin-and-shift":
            rows = _subtract_pressure_means(mesh, ph, rows, vh.n_dofs)
        report = SolveReport("direct", resid, float(np.max(np.abs(system.rhs))) or 1.0)
        sol.append(vh, ph, rows, report)
        nv = vh.n_dofs
        theta1 = time_cell_blocks(slab.time_degree).theta_right
        last = dm.time_ids_of_cell(slab.n_cells - 1)
        vx_end = sum(theta1[a] * rows[last[a], :nv] for a in range(len(last)))
        vy_end = sum(theta1[a] * rows[last[a], nv:2 * nv] for a in range(len(last)))
        prev = (SpaceField(mesh, vh, vx_end), SpaceField(mesh, vh, vy_end))
    return sol


def _interpolate_pair(func, mesh, vh) -> tuple[SpaceField, SpaceField]:
    x = vh.node_coords[:, 0]
    y = vh.node_coords[:, 1]
    vx, vy = func(x, y)
    return (SpaceField(mesh, vh, np.asarray(np.broadcast_to(vx, x.shape), dtype=float)),
            SpaceField(mesh, vh, np.asarray(np.broadcast_to(vy, y.shape), dtype=float)))


def _lift_only(n: int, constraints: dict) -> tuple[None, np.ndarray, None]:
    lift = np.zeros(n)
    for dof, (_, g) in constraints.items():
        lift[dof] = g
    return None, lift, None
