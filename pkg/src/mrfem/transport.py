"""Space-time discretization of the convection-diffusion-reaction problem.

Continuous Q_p in space, dG(r) in time, slabwise marching through the jump
trace. Convection velocities come from a VelocityProbe (discrete multirate
flow or analytic field) evaluated per temporal node and cached per flow
interval. Optional SUPG stabilization with cellwise parameter
delta_K = delta0 * diam(K) modifies the test space by + delta_K v.grad;
the same routine assembles the adjoint (dual) operator by swapping the
scatter direction, which realizes the transpose exactly.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .dofs import DoFHandler, build_constraints, get_handler
from .fem import TimeBasis, time_cell_blocks
from .fields import CellQuadBatch, SpaceField, VelocityProbe, quad_batch
from .linsys import condense, distribute, solve
from .slabs import Slab
from .tensor import COOBuilder, SlabDoFMap, extend_constraints, scatter_local

__all__ = ["TransportCoefficients", "SlabwiseSolution", "SlabVelocity",
           "assemble_transport_system", "assemble_primal_rhs", "solve_primal"]


@dataclasses.dataclass
class TransportCoefficients:
    """Data of the transport problem.

    ``forcing(x, y, t)`` and ``dirichlet[color](x, y, t)`` broadcast over
    coordinate arrays; colors absent from ``dirichlet`` are natural (zero
    diffusive flux) boundaries. ``initial(x, y)`` is evaluated exactly in the
    first slab's trace term. ``delta0`` scales the SUPG parameter
    delta_K = delta0 * diam(K); zero disables stabilization.
    """

    epsilon: float
    alpha: float
    forcing: Callable | None
    dirichlet: dict[str, Callable]
    initial: Callable
    delta0: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("diffusion coefficient must be positive")


class SlabVelocity:
    """Probe evaluations on batch quadrature points, cached per flow interval.

    With the aligned dG(0) flow of the multirate scheme every temporal node
    of a transport cell falls into the same flow interval, so each (slab,
    batch) pair costs a single evaluation sweep.
    """

    def __init__(self, probe: VelocityProbe):
        self.probe = probe
        self._cache: dict = {}

    def at(self, batch: CellQuadBatch, t: float) -> tuple[np.ndarray, np.ndarray]:
        key = (self.probe.interval_key(t), id(batch))
        if key not in self._cache:
            nc, nq, _ = batch.points.shape
            v = self.probe.eval(batch.points.reshape(-1, 2), t).reshape(nc, nq, 2)
            self._cache[key] = (np.ascontiguousarray(v[:, :, 0]),
                                np.ascontiguousarray(v[:, :, 1]))
        return self._cache[key]


class SlabwiseSolution:
    """Temporal-nodal coefficients of a transport (primal or dual) solution."""

    def __init__(self, slabs: list[Slab], direction: str = "primal"):
        self.slabs = slabs
        self.direction = direction
        self.handlers: list[DoFHandler] = []
        self.coeffs: list[np.ndarray] = []  # each (n_time, n_space)
        self.reports = []
        self.endpoints = np.asarray([s.t_start for s in slabs] + [slabs[-1].t_end])

    def append(self, handler: DoFHandler, rows: np.ndarray, report=None):
        self.handlers.append(handler)
        self.coeffs.append(rows)
        self.reports.append(report)

    def slab_index(self, t: float) -> int:
        """Left-open ownership: slab (t_{n-1}, t_n] owns its right endpoint."""
        tol = 1e-12 * max(abs(self.endpoints[-1]), 1.0)
        i = int(np.searchsorted(self.endpoints, t - tol)) - 1
        return min(max(i, 0), len(self.slabs) - 1)

    def field(self, idx: int, time_dof: int) -> SpaceField:
        return SpaceField(self.slabs[idx].mesh, self.handlers[idx],
                          self.coeffs[idx][time_dof])

    def combo_field(self, idx: int, k: int, theta: np.ndarray) -> SpaceField:
        """Linear combination of one temporal cell's nodal fields."""
        tids = SlabDoFMap(self.handlers[idx].n_dofs, self.slabs[idx].n_cells,
                          self.slabs[idx].time_degree,
                          self.slabs[idx].dof_times()).time_ids_of_cell(k)
        co = np.einsum("a,as->s", theta, self.coeffs[idx][tids])
        return SpaceField(self.slabs[idx].mesh, self.handlers[idx], co)

    def end_field(self, idx: int) -> SpaceField:
        """Left limit at the slab's right endpoint."""
        slab = self.slabs[idx]
        tb = time_cell_blocks(slab.time_degree)
        return self.combo_field(idx, slab.n_cells - 1, tb.theta_right)

    def start_field(self, idx: int) -> SpaceField:
        """Right limit at the slab's left endpoint."""
        tb = time_cell_blocks(self.slabs[idx].time_degree)
        return self.combo_field(idx, 0, tb.theta_left)

    def at(self, points, t: float) -> np.ndarray:
        """Field values at a physical time (left-open in time)."""
        idx = self.slab_index(t)
        slab = self.slabs[idx]
        bounds = np.asarray(slab.boundaries)
        tol = 1e-12 * max(abs(self.endpoints[-1]), 1.0)
        k = min(max(int(np.searchsorted(bounds, t - tol)) - 1, 0), slab.n_cells - 1)
        ta, te = slab.cell(k)
        theta = TimeBasis(slab.time_degree).eval([(t - ta) / (te - ta)])[0]
        return self.combo_field(idx, k, theta).at(points)

    @property
    def n_dofs_total(self) -> int:
        return sum(c.size for c in self.coeffs)


def _eval_prev(prev, points: np.ndarray) -> np.ndarray:
    if isinstance(prev, SpaceField):
        return prev.at(points)
    return np.broadcast_to(np.asarray(prev(points[:, 0], points[:, 1]), dtype=float),
                           (len(points),))


def assemble_transport_system(slab: Slab, handler: DoFHandler,
                              coeffs: TransportCoefficients, probe: VelocityProbe,
                              direction: str = "primal",
                              vel: SlabVelocity | None = None):
    """Space-time operator of one slab (unconstrained).

    ``handler`` fixes the spatial degree (the dual solver passes an enriched
    space on the same mesh). Returns ``(A, dofmap)``; with direction "dual"
    the matrix is the exact transpose of the primal one.
    """
    mesh = slab.mesh
    p = handler.degree
    bil = quad_batch(mesh, p, p + 1)
    dm = SlabDoFMap(handler.n_dofs, slab.n_cells, slab.time_degree, slab.dof_times())
    tb = time_cell_blocks(slab.time_degree)
    r1 = slab.time_degree + 1
    if vel is None:
        vel = SlabVelocity(probe)
    rows = bil.cell_dof_rows(handler)
    nc, nloc = rows.shape
    M = bil.mass_local()
    K = coeffs.epsilon * bil.stiffness_local()
    delta = coeffs.delta0 * bil.diam
    use_supg = coeffs.delta0 != 0.0
    builder = COOBuilder(dm.n_total, direction)
    times = dm.time_dof_times

    for k in range(slab.n_cells):
        ta, te = slab.cell(k)
        tau = te - ta
        tids = dm.time_ids_of_cell(k)
        tka = times[tids]
        A_nodes = []
        supgM_nodes = []
        for a in range(r1):
            vx, vy = vel.at(bil, float(tka[a]))
            VG = vx[:, :, None] * bil.gx + vy[:, :, None] * bil.gy
            A_a = K + coeffs.alpha * M
            A_a = A_a + np.einsum("cq,qi,cqj->cij", bil.wphys, bil.phi, VG)
            if use_supg:
                sm = np.einsum("c,cq,cqi,qj->cij", delta, bil.wphys, VG, bil.phi)
                supgM_nodes.append(sm)
                A_a = A_a + np.einsum("c,cq,cqi,cqj->cij", delta, bil.wphys, VG, VG)
                A_a = A_a + coeffs.alpha * sm
                A_a = A_a - coeffs.epsilon * np.einsum(
                    "c,cq,cqi,cqj->cij", delta, bil.wphys, VG, bil.lap)
            A_nodes.append(A_a)
        # face test functions carry the velocity of the right limit t_F^+,
        # which under alignment is the first temporal node's flow interval
        if use_supg:
            Mface = M + supgM_nodes[0]
        else:
            Mface = M
        loc = np.einsum("ab,cij->caibj", tb.dt, M)
        if use_supg:
            # the temporal-derivative SUPG term carries the test node's velocity
            loc += np.einsum("ab,acij->caibj", tb.dt, np.stack(supgM_nodes))
        loc += np.einsum("a,b,cij->caibj", tb.theta_left, tb.theta_left, Mface)
        for a in range(r1):
            loc[:, a, :, a, :] += tau * tb.weights[a] * A_nodes[a]
        gids = (rows[:, None, :] + dm.n_space * tids[None, :, None]).reshape(nc, r1 * nloc)
        scatter_local(builder, loc.reshape(nc, r1 * nloc, r1 * nloc), gids, gids)
        if k > 0:
            prev_ids = dm.time_ids_of_cell(k - 1)
            cpl = -np.einsum("a,b,cij->caibj", tb.theta_left, tb.theta_right, Mface)
            gprev = (rows[:, None, :] + dm.n_space * prev_ids[None, :, None]).reshape(nc, r1 * nloc)
            scatter_local(builder, cpl.reshape(nc, r1 * nloc, r1 * nloc), gids, gprev)
    return builder.tocsr(), dm


def assemble_primal_rhs(slab: Slab, handler: DoFHandler, dm: SlabDoFMap,
                        coeffs: TransportCoefficients, probe: VelocityProbe,
                        prev, vel: SlabVelocity | None = None) -> np.ndarray:
    """Forcing plus incoming-trace load vector of one primal slab.

    ``prev`` is the predecessor's end-of-slab SpaceField or, on the first
    slab, the initial-value callable evaluated exactly at quadrature points.
    """
    mesh = slab.mesh
    p = handler.degree
    bil = quad_batch(mesh, p, p + 1)
    bf = quad_batch(mesh, p, p + 2)
    tb = time_cell_blocks(slab.time_degree)
    r1 = slab.time_degree + 1
    if vel is None:
        vel = SlabVelocity(probe)
    rows = bil.cell_dof_rows(handler)
    nc, nloc = rows.shape
    delta = coeffs.delta0 * bil.diam
    use_supg = coeffs.delta0 != 0.0
    rhs = np.zeros(dm.n_total)
    times = dm.time_dof_times

    for k in range(slab.n_cells):
        ta, te = slab.cell(k)
        tau = te - ta
        tids = dm.time_ids_of_cell(k)
        load = np.zeros((nc, r1, nloc))
        if coeffs.forcing is not None:
            deltaf = coeffs.delta0 * bf.diam
            for l, gl in enumerate(tb.force_points):
                tl = ta + tau * gl
                g = np.broadcast_to(coeffs.forcing(bf.points[:, :, 0],
                                                   bf.points[:, :, 1], tl),
                                    bf.wphys.shape)
                test = bf.phi[None, :, :]
                if use_supg:
                    vx, vy = vel.at(bf, float(tl))
                    VG = vx[:, :, None] * bf.gx + vy[:, :, None] * bf.gy
                    test = test + deltaf[:, None, None] * VG
                contr = np.einsum("cq,cq,cqi->ci", bf.wphys, g, test)
                load += (tau * tb.force_weights[l] * tb.theta_force[l])[None, :, None] \
                    * contr[:, None, :]
        if k == 0 and prev is not None:
            uprev = _eval_prev(prev, bil.points.reshape(-1, 2)).reshape(nc, -1)
            test = np.broadcast_to(bil.phi[None, :, :], (nc,) + bil.phi.shape)
            if use_supg:
                vx, vy = vel.at(bil, float(times[tids][0]))
                VG = vx[:, :, None] * bil.gx + vy[:, :, None] * bil.gy
                test = test + delta[:, None, None] * VG
            trace = np.einsum("cq,cq,cqi->ci", bil.wphys, uprev, test)
            load += tb.theta_left[None, :, None] * trace[:, None, :]
        gids = rows[:, None, :] + dm.n_space * tids[None, :, None]
        np.add.at(rhs, gids, load)
    return rhs


def transport_constraints(slab: Slab, handler: DoFHandler,
                          coeffs: TransportCoefficients, dm: SlabDoFMap) -> dict:
    """Hanging + Dirichlet constraints per temporal dof, in slab ids."""
    sets = [build_constraints(slab.mesh, handler.degree, coeffs.dirichlet,
                              float(t), handler) for t in dm.time_dof_times]
    return extend_constraints(sets, dm)


def solve_primal(slabs: list[Slab], coeffs: TransportCoefficients,
                 probe: VelocityProbe, method: str = "direct") -> SlabwiseSolution:
    """March the primal transport problem forward over the slab sequence."""
    sol = SlabwiseSolution(slabs, "primal")
    prev = coeffs.initial
    for idx, slab in enumerate(slabs):
        handler = get_handler(slab.mesh, slab.space_degree)
        vel = SlabVelocity(probe)
        A, dm = assemble_transport_system(slab, handler, coeffs, probe,
                                          "primal", vel)
        rhs = assemble_primal_rhs(slab, handler, dm, coeffs, probe, prev, vel)
        cons = transport_constraints(slab, handler, coeffs, dm)
        system = condense(A, rhs, cons)
        y, report = solve(system, method=method)
        u = distribute(y, system)
        sol.append(handler, u.reshape(dm.n_time, dm.n_space).copy(), report)
        prev = sol.end_field(idx)
    return sol
