"""Space-time slabs and the two-rate temporal decomposition.

A slab couples one spatial mesh with a temporal triangulation of its
interval; intervals are left-open, ``(t_start, t_end]``. The transport and
flow sequences partition the same horizon but may step at different rates;
the only admissibility requirement is that every flow endpoint (slab or cell
boundary) is also a transport endpoint, so each transport time cell sees a
single flow interval.

Slab endpoints of the transport sequence are immutable across adaptive
loops; temporal adaptivity bisects cells inside a slab. Flow slabs carry
exactly one time cell with a piecewise-constant (r=0) ansatz; refining the
flow in time therefore splits slabs.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .fem import gauss_rule
from .mesh import SpatialMesh

__all__ = [
    "AlignmentError",
    "Slab",
    "MultirateDecomposition",
    "initialize_decomposition",
    "refine_slab_in_time",
    "verify_alignment",
    "split_flow_slabs",
    "ensure_alignment",
    "step_size_table",
]

_TIME_DECIMALS = 12


class AlignmentError(ValueError):
    pass


def _round_t(t: float) -> float:
    return round(float(t), _TIME_DECIMALS)


@dataclasses.dataclass
class Slab:
    """One space-time slab: interval, temporal cells, discretization, mesh."""

    t_start: float
    t_end: float
    boundaries: np.ndarray  # interior + end boundaries, len n_cells + 1
    space_degree: int
    time_degree: int
    mesh: SpatialMesh
    role: str = "transport"

    def __post_init__(self):
        self.boundaries = np.asarray([_round_t(t) for t in self.boundaries], dtype=float)
        self.t_start = _round_t(self.t_start)
        self.t_end = _round_t(self.t_end)
        if self.boundaries[0] != self.t_start or self.boundaries[-1] != self.t_end:
            raise ValueError("triangulation must span the slab interval")
        if np.any(np.diff(self.boundaries) <= 0):
            raise ValueError("temporal cells must have positive length")
        if self.role == "flow" and self.n_cells != 1:
            raise AlignmentError("flow slabs are restricted to one time cell")
        if self.role == "flow" and self.time_degree != 0:
            raise AlignmentError("flow slabs are restricted to a piecewise-constant ansatz")

    @property
    def n_cells(self) -> int:
        return len(self.boundaries) - 1

    @property
    def length(self) -> float:
        return self.t_end - self.t_start

    def cell(self, k: int) -> tuple[float, float]:
        return (float(self.boundaries[k]), float(self.boundaries[k + 1]))

    def cell_lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def dof_times(self) -> np.ndarray:
        """Physical times of the temporal dofs (Gauss nodes per cell)."""
        nodes = gauss_rule(self.time_degree + 1).points
        out = []
        for k in range(self.n_cells):
            ta, tb = self.cell(k)
            out.extend(ta + nodes * (tb - ta))
        return np.asarray(out)

    def with_mesh(self, mesh: SpatialMesh) -> "Slab":
        return dataclasses.replace(self, mesh=mesh)


def refine_slab_in_time(slab: Slab, cell_flags) -> Slab:
    """Bisect the flagged temporal cells; spatial mesh is untouched."""
    flags = {int(k) for k in cell_flags}
    if any(k < 0 or k >= slab.n_cells for k in flags):
        raise ValueError("temporal cell flag out of range")
    bounds = []
    for k in range(slab.n_cells):
        ta, tb = slab.cell(k)
        bounds.append(ta)
        if k in flags:
            bounds.append(_round_t((ta + tb) / 2.0))
    bounds.append(slab.t_end)
    return dataclasses.replace(slab, boundaries=np.asarray(bounds))


@dataclasses.dataclass
class MultirateDecomposition:
    T: float
    transport: list[Slab]
    flow: list[Slab]

    def transport_endpoints(self) -> np.ndarray:
        pts = {0.0}
        for s in self.transport:
            pts.update(float(t) for t in s.boundaries)
        return np.asarray(sorted(pts))

    def flow_endpoints(self) -> np.ndarray:
        pts = {0.0}
        for s in self.flow:
            pts.update(float(t) for t in s.boundaries)
        return np.asarray(sorted(pts))

    @property
    def n_transport_cells(self) -> int:
        return sum(s.n_cells for s in self.transport)

    @property
    def n_flow_cells(self) -> int:
        return sum(s.n_cells for s in self.flow)


def initialize_decomposition(T: float, transport_steps: int, flow_steps: int,
                             degree: int, time_degree: int, mesh: SpatialMesh,
                             flow_degree: int = 2, flow_time_degree: int = 0,
                             flow_mesh: SpatialMesh | None = None) -> MultirateDecomposition:
    """Uniform two-rate decomposition with one time cell per slab.

    ``flow_steps`` must divide ``transport_steps`` so that flow endpoints are
    transport endpoints from the start.
    """
    if T <= 0 or transport_steps < 1 or flow_steps < 1:
        raise ValueError("horizon and step counts must be positive")
    if transport_steps % flow_steps != 0:
        raise AlignmentError(
            f"flow steps ({flow_steps}) must divide transport steps ({transport_steps})")
    if flow_degree < 2:
        raise ValueError("flow velocity degree must be at least 2 (inf-sup stable pair)")
    fm = flow_mesh if flow_mesh is not None else mesh
    tpts = [_round_t(T * k / transport_steps) for k in range(transport_steps + 1)]
    fpts = [_round_t(T * k / flow_steps) for k in range(flow_steps + 1)]
    transport = [Slab(tpts[k], tpts[k + 1], np.array([tpts[k], tpts[k + 1]]),
                      degree, time_degree, mesh, "transport")
                 for k in range(transport_steps)]
    flow = [Slab(fpts[k], fpts[k + 1], np.array([fpts[k], fpts[k + 1]]),
                 flow_degree, flow_time_degree, fm, "flow")
            for k in range(flow_steps)]
    return MultirateDecomposition(float(T), transport, flow)


def verify_alignment(dec: MultirateDecomposition, tol: float | None = None):
    """Check that flow endpoints are a subset of transport endpoints.

    Returns ``(ok, violations)`` where violations lists flow endpoints with
    no transport endpoint within the tolerance (default ``1e-12 * T``).
    """
    tol = 1e-12 * max(dec.T, 1.0) if tol is None else tol
    tpts = dec.transport_endpoints()
    bad = []
    for t in dec.flow_endpoints():
        i = np.searchsorted(tpts, t)
        near = min(
            abs(t - tpts[i - 1]) if i > 0 else np.inf,
            abs(tpts[i] - t) if i < len(tpts) else np.inf,
        )
        if near > tol:
            bad.append(float(t))
    return (len(bad) == 0, bad)


def split_flow_slabs(dec: MultirateDecomposition, which=None) -> list[Slab]:
    """Bisect flow slabs (all by default), in place on the decomposition.

    Each selected slab becomes two one-cell slabs; the caller is responsible
    for restoring alignment of the transport side afterwards (see
    :func:`ensure_alignment`).
    """
    sel = set(range(len(dec.flow))) if which is None else {int(i) for i in which}
    out: list[Slab] = []
    for i, s in enumerate(dec.flow):
        if i in sel:
            tm = _round_t((s.t_start + s.t_end) / 2.0)
            out.append(Slab(s.t_start, tm, np.array([s.t_start, tm]),
                            s.space_degree, s.time_degree, s.mesh, "flow"))
            out.append(Slab(tm, s.t_end, np.array([tm, s.t_end]),
                            s.space_degree, s.time_degree, s.mesh, "flow"))
        else:
            out.append(s)
    dec.flow = out
    return out


def ensure_alignment(dec: MultirateDecomposition, max_bisections: int = 60) -> list[float]:
    """Force-refine transport cells so all flow endpoints become boundaries.

    Returns the list of endpoints that required transport bisections. Works
    in place on the transport slab list.
    """
    tol = 1e-12 * max(dec.T, 1.0)
    inserted = []
    for t in dec.flow_endpoints():
        tpts = dec.transport_endpoints()
        if np.min(np.abs(tpts - t)) <= tol:
            continue
        for i, s in enumerate(dec.transport):
            if s.t_start - tol < t <= s.t_end + tol:
                slab = s
                for _ in range(max_bisections):
                    k = int(np.searchsorted(slab.boundaries, t - tol))
                    if k == 0 or abs(slab.boundaries[k - 1] - t) <= tol or abs(slab.boundaries[min(k, slab.n_cells)] - t) <= tol:
                        break
                    slab = refine_slab_in_time(slab, [k - 1])
                    if np.min(np.abs(slab.boundaries - t)) <= tol:
                        break
                else:
                    raise AlignmentError(f"could not align transport to flow endpoint {t}")
                dec.transport[i] = slab
                inserted.append(float(t))
                break
        else:
            raise AlignmentError(f"flow endpoint {t} outside transport horizon")
    return inserted


def step_size_table(slabs: list[Slab]) -> np.ndarray:
    """Rows (t_right, length) for every temporal cell, in time order."""
    rows = []
    for s in slabs:
        for k in range(s.n_cells):
            ta, tb = s.cell(k)
            rows.append((tb, tb - ta))
    return np.asarray(rows)
