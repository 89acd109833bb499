"""Discrete field containers, cross-mesh evaluation, transfer, flow probe.

Evaluation is batched: points are located on the owning mesh in one
vectorized pass and basis contractions run over all points at once, so
cross-mesh coupling (transport quadrature on flow fields, slab-to-slab
traces on changed meshes) stays cheap at every scale used here.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .dofs import ConstraintSet, DoFHandler
from .fem import SpaceBasis, TimeBasis, gauss_rule
from .mesh import SpatialMesh
from .slabs import Slab

__all__ = ["SpaceField", "transfer_scalar", "FlowSolution", "VelocityProbe",
           "CellQuadBatch", "quad_batch"]

_basis_cache: dict[int, SpaceBasis] = {}


def space_basis(degree: int) -> SpaceBasis:
    if degree not in _basis_cache:
        _basis_cache[degree] = SpaceBasis(degree)
    return _basis_cache[degree]


@dataclasses.dataclass
class SpaceField:
    """Scalar finite element function (one spatial snapshot)."""

    mesh: SpatialMesh
    handler: DoFHandler
    coeffs: np.ndarray

    def at(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells, xi = self.mesh.locate_batch(pts)
        rows = self.handler.cell_row[cells]
        B = space_basis(self.handler.degree).eval(xi[:, 0], xi[:, 1])
        return np.einsum("pi,pi->p", B, self.coeffs[self.handler.cell_dofs[rows]])

    def grad_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells, xi = self.mesh.locate_batch(pts)
        rows = self.handler.cell_row[cells]
        G = space_basis(self.handler.degree).grad(xi[:, 0], xi[:, 1])
        loc = self.coeffs[self.handler.cell_dofs[rows]]
        hx = self.mesh.cell_x1[cells] - self.mesh.cell_x0[cells]
        hy = self.mesh.cell_y1[cells] - self.mesh.cell_y0[cells]
        g = np.einsum("pid,pi->pd", G, loc)
        g[:, 0] /= hx
        g[:, 1] /= hy
        return g


def transfer_scalar(old: SpaceField, mesh: SpatialMesh, handler: DoFHandler,
                    hanging: ConstraintSet | None = None) -> np.ndarray:
    """Nodal interpolation onto a new space; conforming fix-up afterwards.

    Exact whenever the new mesh resolves the old one (identity on identical
    meshes); plain interpolation, not a projection, on coarsened regions.
    """
    vals = old.at(handler.node_coords)
    if hanging is not None:
        vals = hanging.apply_to_vector(vals)
    return vals


class FlowSolution:
    """Per-slab velocity/pressure coefficients of the flow discretization.

    Coefficient layout per temporal dof: [vx | vy | p] with vx/vy on the
    velocity handler and p on the pressure handler.
    """

    def __init__(self, slabs: list[Slab]):
        self.slabs = slabs
        self.handlers: list[tuple[DoFHandler, DoFHandler]] = []
        self.coeffs: list[np.ndarray] = []  # each (n_time, n_space_total)
        self.reports = []
        self.endpoints = np.asarray([s.t_start for s in slabs] + [slabs[-1].t_end])

    def append(self, vh: DoFHandler, ph: DoFHandler, coeffs: np.ndarray, report=None):
        self.handlers.append((vh, ph))
        self.coeffs.append(coeffs)
        self.reports.append(report)

    def slab_index(self, t: float) -> int:
        """Left-open lookup: interval (t_{n-1}, t_n] owns its right endpoint."""
        tol = 1e-12 * max(abs(self.endpoints[-1]), 1.0)
        i = int(np.searchsorted(self.endpoints, t - tol)) - 1
        return min(max(i, 0), len(self.slabs) - 1)

    def velocity_parts(self, idx: int, time_dof: int) -> tuple[SpaceField, SpaceField]:
        vh, _ = self.handlers[idx]
        nv = vh.n_dofs
        c = self.coeffs[idx][time_dof]
        return (SpaceField(self.slabs[idx].mesh, vh, c[:nv]),
                SpaceField(self.slabs[idx].mesh, vh, c[nv:2 * nv]))

    def pressure_part(self, idx: int, time_dof: int) -> SpaceField:
        vh, ph = self.handlers[idx]
        c = self.coeffs[idx][time_dof]
        return SpaceField(self.slabs[idx].mesh, ph, c[2 * vh.n_dofs:])

    def velocity_at(self, points, t: float) -> np.ndarray:
        idx = self.slab_index(t)
        slab = self.slabs[idx]
        theta = TimeBasis(slab.time_degree).eval(
            [(t - slab.t_start) / slab.length])[0]
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros((len(pts), 2))
        for a, w in enumerate(theta):
            if w == 0.0:
                continue
            fx, fy = self.velocity_parts(idx, a)
            out[:, 0] += w * fx.at(pts)
            out[:, 1] += w * fy.at(pts)
        return out

    def velocity_grad_at(self, points, t: float) -> np.ndarray:
        """Velocity Jacobians, shape (npts, 2, 2): out[:, i, j] = d v_i / d x_j."""
        idx = self.slab_index(t)
        slab = self.slabs[idx]
        theta = TimeBasis(slab.time_degree).eval([(t - slab.t_start) / slab.length])[0]
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros((len(pts), 2, 2))
        for a, w in enumerate(theta):
            if w == 0.0:
                continue
            fx, fy = self.velocity_parts(idx, a)
            out[:, 0, :] += w * fx.grad_at(pts)
            out[:, 1, :] += w * fy.grad_at(pts)
        return out


class VelocityProbe:
    """Convection-field oracle for the transport problem.

    Wraps either a discrete :class:`FlowSolution` or an analytic callable
    ``v(x, y, t) -> (vx, vy)``. Evaluation at an interval endpoint uses the
    slab owning it from the left (left-open convention).
    """

    def __init__(self, source):
        self.source = source
        self.discrete = isinstance(source, FlowSolution)

    def interval_key(self, t: float):
        """Cache key identifying the flow data actually used at time t."""
        if not self.discrete:
            return ("analytic", round(float(t), 12))
        return ("slab", self.source.slab_index(t))

    def eval(self, points, t: float) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.discrete:
            return self.source.velocity_at(pts, t)
        vx, vy = self.source(pts[:, 0], pts[:, 1], t)
        return np.column_stack([np.broadcast_to(vx, len(pts)), np.broadcast_to(vy, len(pts))])


class CellQuadBatch:
    """Precomputed per-cell quadrature data for vectorized assembly.

    Bundles, for every active cell of a mesh and a tensor Gauss rule with
    ``n`` points per direction, the reference basis tables and per-cell
    geometry factors. All assembly loops reduce to einsum contractions over
    these arrays. Instances are cached on the mesh, keyed by (degree, n).
    """

    def __init__(self, mesh, degree: int, n: int):
        self.mesh = mesh
        self.degree = degree
        self.n = n
        basis = space_basis(degree)
        rule = gauss_rule(n)
        # tensor rule on the unit square, x index fastest
        gx, gy = np.meshgrid(rule.points, rule.points, indexing="xy")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        wx, wy = np.meshgrid(rule.weights, rule.weights, indexing="xy")
        self.ref_points = pts
        self.ref_weights = (wx * wy).ravel()
        xi, eta = pts[:, 0], pts[:, 1]
        self.phi = basis.eval(xi, eta)                  # (nq, nloc)
        grads = basis.grad(xi, eta)                     # (nq, nloc, 2)
        self.dphi_xi = np.ascontiguousarray(grads[:, :, 0])
        self.dphi_eta = np.ascontiguousarray(grads[:, :, 1])
        self.d2phi_xi, self.d2phi_eta = basis.second(xi, eta)

        cells = mesh.active_cells
        self.cells = cells
        nc = len(cells)
        self.hx = mesh.cell_x1[cells] - mesh.cell_x0[cells]
        self.hy = mesh.cell_y1[cells] - mesh.cell_y0[cells]
        self.diam = np.hypot(self.hx, self.hy)
        self.wphys = self.ref_weights[None, :] * (self.hx * self.hy)[:, None]
        x0 = mesh.cell_x0[cells][:, None]
        y0 = mesh.cell_y0[cells][:, None]
        self.points = np.empty((nc, len(pts), 2))
        self.points[:, :, 0] = x0 + pts[None, :, 0] * self.hx[:, None]
        self.points[:, :, 1] = y0 + pts[None, :, 1] * self.hy[:, None]
        # physical first derivatives, (nc, nq, nloc)
        self.gx = self.dphi_xi[None, :, :] / self.hx[:, None, None]
        self.gy = self.dphi_eta[None, :, :] / self.hy[:, None, None]
        # physical Laplacian of the tensor basis on axis-aligned rectangles
        self.lap = (self.d2phi_xi[None, :, :] / (self.hx ** 2)[:, None, None]
                    + self.d2phi_eta[None, :, :] / (self.hy ** 2)[:, None, None])

    def cell_dof_rows(self, handler) -> np.ndarray:
        """Global dof ids per batch cell, (nc, nloc)."""
        return handler.cell_dofs[handler.cell_row[self.cells]]

    def mass_local(self) -> np.ndarray:
        """Per-cell mass matrices, (nc, nloc, nloc)."""
        return np.einsum("cq,qi,qj->cij", self.wphys, self.phi, self.phi)

    def stiffness_local(self) -> np.ndarray:
        """Per-cell stiffness matrices for the full gradient contraction."""
        kx = np.einsum("q,qi,qj->ij", self.ref_weights, self.dphi_xi, self.dphi_xi)
        ky = np.einsum("q,qi,qj->ij", self.ref_weights, self.dphi_eta, self.dphi_eta)
        return ((self.hy / self.hx)[:, None, None] * kx
                + (self.hx / self.hy)[:, None, None] * ky)

    def integrate(self, values) -> float:
        """Integral over the mesh of values sampled at the batch points."""
        return float(np.einsum("cq,cq->", self.wphys, values))


def quad_batch(mesh, degree: int, n: int) -> CellQuadBatch:
    """Cached CellQuadBatch lookup, stored on the mesh object."""
    cache = getattr(mesh, "_qbatches", None)
    if cache is None:
        cache = {}
        mesh._qbatches = cache
    key = (degree, n)
    if key not in cache:
        cache[key] = CellQuadBatch(mesh, degree, n)
    return cache[key]
