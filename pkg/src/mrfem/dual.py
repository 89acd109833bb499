"""Goal functionals and the backward-in-time adjoint transport solve.

The dual problem is posed in an enriched trial space (one polynomial degree
above the primal in space, same temporal ansatz) and marches backward slab
by slab. Each slab system is the exact transpose of the enriched primal
operator on that slab, obtained by swapping the assembly scatter direction;
the inter-slab trace enters through the right-hand side with the incoming
dual value of the later slab. Dirichlet colors of the primal problem become
homogeneous constraints.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .dofs import get_handler
from .fem import TimeBasis, gauss_rule, time_cell_blocks
from .fields import SpaceField, VelocityProbe, quad_batch
from .linsys import condense, distribute, solve
from .problems import l2l2_error
from .transport import (SlabVelocity, SlabwiseSolution, TransportCoefficients,
                        assemble_transport_system, transport_constraints)

__all__ = ["GoalFunctional", "error_goal", "mean_goal", "normalize_goal",
           "assemble_dual_rhs", "solve_dual"]


@dataclasses.dataclass
class GoalFunctional:
    """Linear target quantity driving the adjoint problem.

    kind "l2l2-error" pairs the argument with the normalized error of the
    final primal solution, so the goal error equals the global L2(L2) error
    itself; kind "space-time-mean" is the plain space-time average. The
    normalization carries the error norm once computed (see
    :func:`normalize_goal`); ``time_rule`` fixes the temporal quadrature
    convention shared by the norm, the dual right-hand side, and the
    estimator's goal terms. The default "nodal" samples at the scheme's
    own temporal nodes, keeping the goal self-consistent with the discrete
    evolution; "gauss" upgrades to a rule two orders above the ansatz.
    Reported error columns use the accurate rule regardless.
    """

    kind: str
    exact: Callable | None = None
    normalization: float = 1.0
    time_rule: str = "nodal"

    def __post_init__(self):
        if self.kind not in ("l2l2-error", "space-time-mean"):
            raise ValueError(f"unknown goal kind {self.kind!r}")
        if self.kind == "l2l2-error" and self.exact is None:
            raise ValueError("error goal needs the analytic solution")


def error_goal(exact: Callable, time_rule: str = "nodal") -> GoalFunctional:
    return GoalFunctional("l2l2-error", exact=exact, time_rule=time_rule)


def mean_goal() -> GoalFunctional:
    return GoalFunctional("space-time-mean")


def normalize_goal(goal: GoalFunctional, primal: SlabwiseSolution) -> GoalFunctional:
    """Fix the goal's normalization from the final primal solution."""
    if goal.kind != "l2l2-error":
        return goal
    err = l2l2_error(primal, goal.exact, time_rule=goal.time_rule)
    return dataclasses.replace(goal, normalization=err)


def _zero_scalar(x, y, t):
    return np.zeros_like(np.asarray(x, dtype=float) + np.asarray(y, dtype=float))


def _homogeneous(coeffs: TransportCoefficients) -> TransportCoefficients:
    return dataclasses.replace(
        coeffs, forcing=None,
        dirichlet={c: _zero_scalar for c in coeffs.dirichlet},
        initial=lambda x, y: _zero_scalar(x, y, 0.0))


def _goal_time_rule(order: int, time_rule: str):
    if time_rule == "gauss":
        return gauss_rule(order + 2)
    if time_rule == "nodal":
        return gauss_rule(order + 1)
    raise ValueError(f"unknown time rule {time_rule!r}")


def assemble_dual_rhs(slab, handler, dm, goal: GoalFunctional,
                      primal: SlabwiseSolution, idx: int,
                      span: float, area: float) -> np.ndarray:
    """Goal-derivative load vector of one dual slab, (n_time, n_space) raveled.

    The temporal pairing integrates with the goal's own rule; each temporal
    quadrature point distributes its spatial load over the test nodes with
    the temporal basis values there.
    """

    mesh = handler.mesh
    q = handler.degree
    r = slab.time_degree
    rule = _goal_time_rule(r, goal.time_rule)
    theta = TimeBasis(r).eval(rule.points)
    bq = quad_batch(mesh, q, q + 2)
    rows_q = bq.cell_dof_rows(handler)
    rhs = np.zeros((dm.n_time, dm.n_space))
    if goal.kind == "space-time-mean":
        base = np.einsum("cq,qi->ci", bq.wphys, bq.phi) / (span * area)
        for k in range(slab.n_cells):
            t0, t1 = slab.cell(k)
            tau = t1 - t0
            for a in range(r + 1):
                wa = float(np.dot(rule.weights, theta[:, a]))
                np.add.at(rhs[k * (r + 1) + a], rows_q, tau * wa * base)
        return rhs.ravel()

    ph = primal.handlers[idx]
    bp = quad_batch(mesh, ph.degree, q + 2)
    rows_p = bp.cell_dof_rows(ph)
    norm = max(goal.normalization, 1e-300)
    px = bq.points[:, :, 0]
    py = bq.points[:, :, 1]
    for k in range(slab.n_cells):
        t0, t1 = slab.cell(k)
        tau = t1 - t0
        tids = k * (r + 1) + np.arange(r + 1)
        cell_co = primal.coeffs[idx][tids]
        for g in range(len(rule.points)):
            t = t0 + rule.points[g] * tau
            co = theta[g] @ cell_co
            uh = np.einsum("qi,ci->cq", bp.phi, co[rows_p])
            err = goal.exact(px, py, t) - uh
            contrib = np.einsum("cq,cq,qi->ci", bq.wphys, err, bq.phi)
            for a in range(r + 1):
                np.add.at(rhs[tids[a]], rows_q,
                          (tau * rule.weights[g] * theta[g, a] / norm) * contrib)
    return rhs.ravel()


def _trace_rhs(slab, handler, dm, coeffs, vel, z_next: SpaceField,
               t_next_first: float) -> np.ndarray:
    """Incoming-trace load of the later slab's dual value.

    Transpose of the forward jump coupling: the later slab's start value,
    tested with this slab's basis (convection-stabilized when SUPG is on),
    lands on the last temporal cell weighted by the right-endpoint values of
    the temporal basis.
    """

    mesh = handler.mesh
    q = handler.degree
    r = slab.time_degree
    bq = quad_batch(mesh, q, q + 1)
    rows_q = bq.cell_dof_rows(handler)
    if z_next.mesh.uid == mesh.uid and z_next.handler.degree == q:
        zv = np.einsum("qi,ci->cq", bq.phi, z_next.coeffs[rows_q])
        if coeffs.delta0 != 0.0:
            zx = np.einsum("cqi,ci->cq", bq.gx, z_next.coeffs[rows_q])
            zy = np.einsum("cqi,ci->cq", bq.gy, z_next.coeffs[rows_q])
        else:
            zx = zy = None
    else:
        pts = bq.points.reshape(-1, 2)
        zv = z_next.at(pts).reshape(bq.points.shape[:2])
        if coeffs.delta0 != 0.0:
            grad = z_next.grad_at(pts)
            zx = grad[:, 0].reshape(zv.shape)
            zy = grad[:, 1].reshape(zv.shape)
        else:
            zx = zy = None
    integrand = zv
    if coeffs.delta0 != 0.0:
        vx, vy = vel.at(bq, t_next_first)
        delta = coeffs.delta0 * bq.diam
        integrand = zv + delta[:, None] * (vx * zx + vy * zy)
    contrib = np.einsum("cq,cq,qi->ci", bq.wphys, integrand, bq.phi)
    tb = time_cell_blocks(r)
    rhs = np.zeros((dm.n_time, dm.n_space))
    for b in range(r + 1):
        tid = (slab.n_cells - 1) * (r + 1) + b
        np.add.at(rhs[tid], rows_q, tb.theta_right[b] * contrib)
    return rhs.ravel()


def solve_dual(primal: SlabwiseSolution, coeffs: TransportCoefficients,
               probe: VelocityProbe, goal: GoalFunctional,
               dual_degree: int | None = None,
               method: str = "direct") -> SlabwiseSolution:
    """March the adjoint problem backward over the primal's slab sequence.

    Returns a slabwise solution in forward slab order whose spatial degree is
    ``dual_degree`` (default: primal degree + 1) on the primal meshes. The
    goal must already carry its normalization.
    """

    n = len(primal.slabs)
    span = float(primal.endpoints[-1] - primal.slabs[0].t_start)
    area = primal.slabs[0].mesh.total_area()
    dual_slabs = []
    for slab in primal.slabs:
        q = (slab.space_degree + 1) if dual_degree is None else dual_degree
        if q <= slab.space_degree:
            raise ValueError("dual space must be richer than the primal one")
        dual_slabs.append(dataclasses.replace(slab, space_degree=q))
    hom = _homogeneous(coeffs)
    results = [None] * n
    z_next: SpaceField | None = None
    for idx in range(n - 1, -1, -1):
        slab = dual_slabs[idx]
        handler = get_handler(slab.mesh, slab.space_degree)
        vel = SlabVelocity(probe)
        A, dm = assemble_transport_system(slab, handler, coeffs, probe,
                                          "dual", vel)
        rhs = assemble_dual_rhs(slab, handler, dm, goal, primal, idx, span, area)
        if z_next is not None:
            t_next_first = float(dual_slabs[idx + 1].dof_times()[0])
            rhs = rhs + _trace_rhs(slab, handler, dm, coeffs, vel, z_next,
                                   t_next_first)
        cons = transport_constraints(slab, handler, hom, dm)
        system = condense(A, rhs, cons)
        y, report = solve(system, method=method)
        z = distribute(y, system)
        results[idx] = (handler, z.reshape(dm.n_time, dm.n_space).copy(), report)
        tb = time_cell_blocks(slab.time_degree)
        first = results[idx][1][:slab.time_degree + 1]
        z_next = SpaceField(slab.mesh, handler, tb.theta_left @ first)
    sol = SlabwiseSolution(dual_slabs, "dual")
    for handler, rows, report in results:
        sol.append(handler, rows, report)
    return sol
