"""Goal-driven space-time adaptation loop for the coupled problem.

Each loop solves the flow and the primal transport problem, evaluates the
dual-weighted indicators, and refines: slabs carrying the worst temporal
shares are bisected in time, cells carrying the worst spatial shares are
refined through the quadtree (smoothing handled by the mesh closure), and
the flow discretization is refined globally in space and time whenever its
error dominates the transport error. Marking is count-based: the
ceil(theta * count) entries of largest magnitude are flagged.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable

import numpy as np

from .dofs import get_handler
from .dual import GoalFunctional, error_goal, normalize_goal, solve_dual
from .estimator import (EstimatorOptions, ErrorIndicators, compute_indicators,
                        effectivity_index)
from .fields import VelocityProbe
from .mesh import refine_and_coarsen, uniform_refine
from .problems import ProblemDefinition, l2l2_error
from .slabs import (AlignmentError, MultirateDecomposition, Slab, _round_t,
                    refine_slab_in_time, verify_alignment)
from .stokes import solve_flow
from .transport import solve_primal

__all__ = ["AdaptivityConfig", "LoopRecord", "LoopReport", "balance_thetas",
           "select_branch", "mark_fraction", "flow_refine_decision",
           "run_dwr_loop"]


def balance_thetas(eta_h: float, eta_tau: float,
                   variant: str = "plain") -> tuple[float, float]:
    """Split the marking fractions by the indicator shares.

    "plain" returns 0.5 * |eta_x| / (|eta_h| + |eta_tau|) per direction;
    "clamped" caps each share at 1 before halving (inert for a two-term
    split, kept as stated). Both indicators zero falls back to (0.25, 0.25).
    """
    if variant not in ("plain", "clamped"):
        raise ValueError(f"unknown balancing variant {variant!r}")
    ah, at = abs(eta_h), abs(eta_tau)
    tot = ah + at
    if tot == 0.0:
        return 0.25, 0.25
    rh, rt = ah / tot, at / tot
    if variant == "clamped":
        rh, rt = min(rh, 1.0), min(rt, 1.0)
    return 0.5 * rh, 0.5 * rt


def select_branch(eta_h: float, eta_tau: float, omega: float = 3.0) -> str:
    """Pick the refinement branch: "temporal", "spatial", or "both"."""
    if omega < 1.0:
        raise ValueError("branch balance factor must be at least 1")
    ah, at = abs(eta_h), abs(eta_tau)
    if at > omega * ah:
        return "temporal"
    if ah > omega * at:
        return "spatial"
    return "both"


def mark_fraction(values, theta: float, mode: str = "worst") -> set[int]:
    """Indices of the ceil(theta * n) largest-|.| (or smallest) entries.

    Ties are broken toward the lower index; theta = 0 marks nothing and
    theta = 1 marks everything.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("marking fraction must lie in [0, 1]")
    if mode not in ("worst", "best"):
        raise ValueError(f"unknown marking mode {mode!r}")
    v = np.abs(np.asarray(values, dtype=float))
    count = math.ceil(theta * len(v))
    if count == 0:
        return set()
    order = np.argsort(-v if mode == "worst" else v, kind="stable")
    return {int(i) for i in order[:count]}


def flow_refine_decision(flow_error, transport_error, mode: str,
                         loop: int | None = None,
                         schedule: tuple[int, ...] = ()) -> bool:
    """Whether to refine the flow discretization globally this loop."""
    if mode == "never":
        return False
    if mode == "fixed-schedule":
        if loop is None:
            raise ValueError("fixed-schedule mode needs the loop index")
        return loop in set(schedule)
    if mode == "error-comparison":
        if flow_error is None or transport_error is None:
            raise ValueError(
                "error-comparison mode needs both reference errors")
        return flow_error > transport_error
    raise ValueError(f"unknown flow refinement mode {mode!r}")


@dataclasses.dataclass
class AdaptivityConfig:
    """Tuning knobs of the adaptive loop.

    Marking fractions set to "auto" are rebalanced each loop from the
    indicator shares (see :func:`balance_thetas`); the bottom fraction
    controls coarsening and defaults to off. ``flow_mode`` picks how the
    global flow refinement is triggered; ``flow_schedule`` lists the loop
    indices for the fixed schedule.
    """

    omega: float = 3.0
    theta_tau_top: float | str = "auto"
    theta_h1_top: float | str = "auto"
    theta_h2_top: float | str = "auto"
    theta_h_bottom: float = 0.0
    balance: str = "plain"
    max_loops: int = 10
    goal_tolerance: float = 0.0
    flow_mode: str = "error-comparison"
    flow_schedule: tuple[int, ...] = ()
    dual_degree: int | None = None
    estimator: EstimatorOptions = dataclasses.field(
        default_factory=EstimatorOptions)
    method: str = "direct"

    def __post_init__(self):
        if self.omega < 1.0:
            raise ValueError("branch balance factor must be at least 1")
        if self.max_loops < 1:
            raise ValueError("need at least one loop")
        if self.balance not in ("plain", "clamped"):
            raise ValueError(f"unknown balancing variant {self.balance!r}")
        if self.flow_mode not in ("error-comparison", "fixed-schedule",
                                  "never"):
            raise ValueError(f"unknown flow refinement mode "
                             f"{self.flow_mode!r}")
        for name in ("theta_tau_top", "theta_h1_top", "theta_h2_top"):
            val = getattr(self, name)
            if val != "auto" and not 0.0 <= float(val) <= 1.0:
                raise ValueError(f"{name} must be 'auto' or in [0, 1]")
        if not 0.0 <= self.theta_h_bottom <= 1.0:
            raise ValueError("theta_h_bottom must lie in [0, 1]")
        h1, h2 = self.theta_h1_top, self.theta_h2_top
        if h1 != "auto" and h2 != "auto" and float(h2) > float(h1):
            raise ValueError("theta_h2_top must not exceed theta_h1_top")


@dataclasses.dataclass
class LoopRecord:
    """One table row of the adaptive history."""

    loop: int
    flow_cells: int
    flow_space_cells: int
    flow_dofs: int
    flow_error: float | None
    time_cells: int
    space_cells_max: int
    transport_dofs: int
    transport_error: float | None
    eta_h: float
    eta_tau: float
    eta_total: float
    effectivity: float | None
    branch: str


@dataclasses.dataclass
class LoopReport:
    """Outcome of a full adaptive run."""

    records: list[LoopRecord]
    indicators: list[ErrorIndicators]
    decomposition: MultirateDecomposition
    stop_reason: str

    @property
    def n_loops(self) -> int:
        return len(self.records)


def _transport_dofs(slabs: list[Slab]) -> int:
    tot = 0
    for s in slabs:
        handler = get_handler(s.mesh, s.space_degree)
        tot += s.n_cells * (s.time_degree + 1) * handler.n_dofs
    return tot


def _flow_dofs(slabs: list[Slab]) -> int:
    tot = 0
    for s in slabs:
        vh = get_handler(s.mesh, s.space_degree)
        ph = get_handler(s.mesh, s.space_degree - 1)
        tot += s.n_cells * (s.time_degree + 1) * (2 * vh.n_dofs + ph.n_dofs)
    return tot


def _resolve_thetas(cfg: AdaptivityConfig, eta_h: float,
                    eta_tau: float) -> tuple[float, float, float]:
    ah, at = balance_thetas(eta_h, eta_tau, cfg.balance)
    tt = at if cfg.theta_tau_top == "auto" else float(cfg.theta_tau_top)
    h1 = ah if cfg.theta_h1_top == "auto" else float(cfg.theta_h1_top)
    h2 = ah if cfg.theta_h2_top == "auto" else float(cfg.theta_h2_top)
    return tt, h1, h2


def _refine_transport(slabs: list[Slab], ind: ErrorIndicators,
                      cfg: AdaptivityConfig) -> tuple[list[Slab], str]:
    eta_h, eta_tau = ind.eta_h, ind.eta_tau
    branch = select_branch(eta_h, eta_tau, cfg.omega)
    tt, th1, th2 = _resolve_thetas(cfg, eta_h, eta_tau)
    tmarks = (mark_fraction(ind.eta_tau_slabs, tt)
              if branch in ("temporal", "both") else set())
    out = list(slabs)
    if branch in ("spatial", "both"):
        for n, slab in enumerate(slabs):
            theta = th1 if n in tmarks else th2
            shares = ind.eta_h_cells[n]
            ref = mark_fraction(shares, theta, "worst")
            coar = mark_fraction(shares, cfg.theta_h_bottom, "best") - ref
            ids = ind.cells[n]
            mesh, _ = refine_and_coarsen(slab.mesh,
                                         [ids[i] for i in sorted(ref)],
                                         [ids[i] for i in sorted(coar)])
            out[n] = slab.with_mesh(mesh)
    for n in tmarks:
        shares = np.abs(ind.eta_tau_cells[n])
        # every cell holding at least the mean share of its slab is bisected
        flags = {k for k in range(len(shares))
                 if shares[k] >= shares.mean()}
        out[n] = refine_slab_in_time(out[n], flags)
    return out, branch


def _refine_flow(slabs: list[Slab]) -> list[Slab]:
    mesh = uniform_refine(slabs[0].mesh, 1)
    out = []
    for s in slabs:
        tm = _round_t(0.5 * (s.t_start + s.t_end))
        for a, b in ((s.t_start, tm), (tm, s.t_end)):
            out.append(Slab(a, b, np.array([a, b]), s.space_degree,
                            s.time_degree, mesh, "flow"))
    return out


def _align_transport(slabs: list[Slab], flow_slabs: list[Slab],
                     T: float) -> list[Slab]:
    """Bisect transport time cells until every flow endpoint is matched."""
    tol = 1e-12 * max(T, 1.0)
    fpts = sorted({float(t) for s in flow_slabs for t in s.boundaries})
    out = list(slabs)
    for n, slab in enumerate(out):
        inner = [t for t in fpts
                 if slab.t_start + tol < t < slab.t_end - tol]
        if not inner:
            continue
        for _ in range(64):
            b = slab.boundaries
            missing = [t for t in inner
                       if np.abs(b - t).min() > tol]
            if not missing:
                break
            flags = {int(np.searchsorted(b, t) - 1) for t in missing}
            slab = refine_slab_in_time(slab, flags)
        else:
            raise AlignmentError(
                f"cannot align slab ({slab.t_start}, {slab.t_end}] to the "
                f"refined flow grid")
        out[n] = slab
    return out


def run_dwr_loop(config: AdaptivityConfig, problem: ProblemDefinition,
                 decomposition: MultirateDecomposition,
                 goal: GoalFunctional | None = None,
                 observer: Callable[[LoopRecord], None] | None = None
                 ) -> LoopReport:
    """Run the adaptive loop until tolerance or the loop budget is hit.

    ``goal`` defaults to the normalized error target and then needs the
    problem's closed-form solution; pass a mean goal for problems without
    one. ``observer`` is called with each finished row (progress hook).
    """
    if goal is None:
        if problem.exact_u is None:
            raise ValueError("default goal needs a closed-form solution")
        goal = error_goal(problem.exact_u)
    dec = decomposition
    records: list[LoopRecord] = []
    indicators: list[ErrorIndicators] = []
    stop = "max-loops"
    prev_eta = None
    for ell in range(1, config.max_loops + 1):
        if prev_eta is not None and abs(prev_eta) < config.goal_tolerance:
            stop = "tolerance"
            break
        flow = solve_flow(dec.flow, problem.flow, method=config.method)
        probe = VelocityProbe(flow)
        primal = solve_primal(dec.transport, problem.transport, probe,
                              method=config.method)
        tr_err = (l2l2_error(primal, problem.exact_u, time_rule="gauss")
                  if problem.exact_u is not None else None)
        fl_err = (l2l2_error(flow, problem.exact_v, time_rule="nodal")
                  if problem.exact_v is not None else None)
        g = normalize_goal(goal, primal)
        dual = solve_dual(primal, problem.transport, probe, g,
                          dual_degree=config.dual_degree,
                          method=config.method)
        ind = compute_indicators(primal, dual, probe, g, problem.transport,
                                 config.estimator)
        ieff = (effectivity_index(ind, tr_err)
                if tr_err is not None and tr_err > 0.0 else None)

        new_transport, branch = _refine_transport(dec.transport, ind, config)
        fmesh = dec.flow[0].mesh
        new_flow = dec.flow
        if flow_refine_decision(fl_err, tr_err, config.flow_mode,
                                loop=ell, schedule=config.flow_schedule):
            new_flow = _refine_flow(dec.flow)
            new_transport = _align_transport(new_transport, new_flow, dec.T)

        rec = LoopRecord(
            loop=ell, flow_cells=dec.n_flow_cells,
            flow_space_cells=fmesh.n_active, flow_dofs=_flow_dofs(dec.flow),
            flow_error=fl_err, time_cells=dec.n_transport_cells,
            space_cells_max=max(s.mesh.n_active for s in dec.transport),
            transport_dofs=_transport_dofs(dec.transport),
            transport_error=tr_err, eta_h=ind.eta_h, eta_tau=ind.eta_tau,
            eta_total=ind.eta_total, effectivity=ieff, branch=branch)
        records.append(rec)
        indicators.append(ind)
        if observer is not None:
            observer(rec)
        prev_eta = ind.eta_total

        dec = MultirateDecomposition(dec.T, new_transport, new_flow)
        ok, bad = verify_alignment(dec)
        if not ok:
            raise AlignmentError(f"refinement broke alignment at {bad}")
    return LoopReport(records, indicators, dec, stop)
