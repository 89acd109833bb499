"""Continuous Q_p degree-of-freedom handlers and algebraic constraints.

Nodes are tensor Lagrange points on each active cell, deduplicated through
rounded coordinates, so conforming neighbors share ids automatically. On
hanging edges the fine-side nodes that do not coincide with coarse nodes are
constrained to the degree-p trace of the coarse side; Dirichlet nodes become
inhomogeneous identity constraints. Closure substitutes constrained masters
until every master is free.
"""

from __future__ import annotations

import numpy as np

from .fem import Lagrange1D
from .mesh import SpatialMesh, _OPPOSITE, _key

__all__ = ["DoFHandler", "ConstraintSet", "build_constraints", "get_handler",
           "hanging_constraints", "boundary_faces_cached"]


def _side_node_indices(p: int, side: int) -> list[int]:
    """Local node indices along a side, ordered along +x (S/N) or +y (W/E)."""
    n = p + 1
    if side == 0:
        return [ix for ix in range(n)]
    if side == 2:
        return [p * n + ix for ix in range(n)]
    if side == 3:
        return [iy * n for iy in range(n)]
    return [iy * n + p for iy in range(n)]


class DoFHandler:
    """Global numbering for a scalar Q_p space on the active cells."""

    def __init__(self, mesh: SpatialMesh, degree: int):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.mesh = mesh
        self.degree = degree
        p = degree
        nodes_1d = np.linspace(0.0, 1.0, p + 1)
        key_to_id: dict = {}
        coords: list[tuple[float, float]] = []
        cell_dofs = np.empty((mesh.n_active, (p + 1) ** 2), dtype=np.int64)
        self.cell_index = {}  # active cell id -> row in cell_dofs
        self.cell_row = np.full(len(mesh.cell_active), -1, dtype=np.int64)
        for row, c in enumerate(mesh.active_cells):
            self.cell_index[int(c)] = row
            self.cell_row[c] = row
            x0, y0, x1, y1 = mesh.cell_box(c)
            xs = [x0 if i == 0 else (x1 if i == p else x0 + nodes_1d[i] * (x1 - x0)) for i in range(p + 1)]
            ys = [y0 if j == 0 else (y1 if j == p else y0 + nodes_1d[j] * (y1 - y0)) for j in range(p + 1)]
            k = 0
            for j in range(p + 1):
                for i in range(p + 1):
                    key = _key(xs[i], ys[j])
                    dof = key_to_id.get(key)
                    if dof is None:
                        dof = len(coords)
                        key_to_id[key] = dof
                        coords.append(key)
                    cell_dofs[row, k] = dof
                    k += 1
        self.cell_dofs = cell_dofs
        self.node_coords = np.asarray(coords, dtype=float)
        self.n_dofs = len(coords)

    def dofs_on_side(self, c: int, side: int) -> list[int]:
        row = self.cell_index[int(c)]
        return [int(self.cell_dofs[row, k]) for k in _side_node_indices(self.degree, side)]


class ConstraintSet:
    """Map constrained dof -> (masters [(dof, coeff), ...], inhomogeneity).

    Dirichlet rows have an empty master list. After :meth:`close`, no master
    is itself constrained.
    """

    def __init__(self):
        self.rows: dict[int, tuple[list[tuple[int, float]], float]] = {}

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, dof: int) -> bool:
        return dof in self.rows

    def add(self, dof: int, masters, inhomogeneity: float = 0.0, overwrite: bool = False):
        if dof in self.rows and not overwrite:
            return
        self.rows[int(dof)] = ([(int(m), float(w)) for m, w in masters], float(inhomogeneity))

    def close(self, max_depth: int = 64) -> "ConstraintSet":
        """Substitute constrained masters until a fixpoint is reached."""
        for _ in range(max_depth):
            dirty = False
            for dof, (masters, g) in list(self.rows.items()):
                if not any(m in self.rows for m, _ in masters):
                    continue
                dirty = True
                new_masters: dict[int, float] = {}
                new_g = g
                for m, w in masters:
                    if m in self.rows:
                        sub_masters, sub_g = self.rows[m]
                        new_g += w * sub_g
                        for sm, sw in sub_masters:
                            if sm == dof:
                                raise ValueError(f"cyclic constraint through dof {dof}")
                            new_masters[sm] = new_masters.get(sm, 0.0) + w * sw
                    else:
                        new_masters[m] = new_masters.get(m, 0.0) + w
                self.rows[dof] = (sorted(new_masters.items()), new_g)
            if not dirty:
                return self
        raise ValueError("constraint closure did not terminate")

    def is_closed(self) -> bool:
        return not any(m in self.rows for masters, _ in self.rows.values() for m, _ in masters)

    def apply_to_vector(self, u: np.ndarray) -> np.ndarray:
        """Overwrite constrained entries from their masters (conforming fix-up)."""
        out = u.copy()
        for dof, (masters, g) in self.rows.items():
            out[dof] = g + sum(w * u[m] for m, w in masters)
        return out

    def copy(self) -> "ConstraintSet":
        out = ConstraintSet()
        out.rows = {d: (list(m), g) for d, (m, g) in self.rows.items()}
        return out


def get_handler(mesh: SpatialMesh, degree: int) -> DoFHandler:
    """Cached DoFHandler, stored on the (immutable) mesh object."""
    cache = getattr(mesh, "_handlers", None)
    if cache is None:
        cache = {}
        mesh._handlers = cache
    if degree not in cache:
        cache[degree] = DoFHandler(mesh, degree)
    return cache[degree]


def boundary_faces_cached(mesh: SpatialMesh) -> list[tuple[int, int, str]]:
    """Cached list of (cell, side, color) boundary faces of the active mesh."""
    faces = getattr(mesh, "_boundary_faces", None)
    if faces is None:
        faces = list(mesh.boundary_faces())
        mesh._boundary_faces = faces
    return faces


def hanging_constraints(mesh: SpatialMesh, degree: int,
                        dof_handler: DoFHandler | None = None) -> ConstraintSet:
    """Hanging-node constraints only, cached per (mesh, degree).

    Time independent, so space-time assembly reuses one set across all
    temporal degrees of freedom and all Dirichlet evaluations.
    """
    cache = getattr(mesh, "_hanging", None)
    if cache is None:
        cache = {}
        mesh._hanging = cache
    if degree in cache:
        return cache[degree]
    h = dof_handler if dof_handler is not None else get_handler(mesh, degree)
    p = degree
    basis = Lagrange1D(np.linspace(0.0, 1.0, p + 1))
    cs = ConstraintSet()
    # hanging edges: this cell is the fine half of a coarser neighbor's side
    for c in mesh.active_cells:
        for side in range(4):
            n = mesh.neighbor(c, side)
            if n < 0 or not mesh.cell_active[n]:
                continue
            if mesh.cell_level[n] != mesh.cell_level[c] - 1:
                continue
            coarse_dofs = h.dofs_on_side(n, _OPPOSITE[side])
            fine_dofs = h.dofs_on_side(c, side)
            # parameter offset of the fine half-edge on the coarse edge
            (fa, _) = mesh.side_verts(c, side)
            (ca, cb) = mesh.side_verts(n, _OPPOSITE[side])
            axis = 0 if side in (0, 2) else 1
            span = mesh.verts[cb][axis] - mesh.verts[ca][axis]
            offset = (mesh.verts[fa][axis] - mesh.verts[ca][axis]) / span
            params = offset + np.arange(p + 1) / p * 0.5
            vals = basis.eval(params)
            for i, t_par in enumerate(params):
                scaled = t_par * p
                if abs(scaled - round(scaled)) < 1e-9:
                    continue  # coincides with a coarse node: shared dof
                masters = [(coarse_dofs[j], vals[i, j]) for j in range(p + 1) if abs(vals[i, j]) > 1e-14]
                cs.add(fine_dofs[i], masters, 0.0)
    cache[degree] = cs
    return cs


def build_constraints(mesh: SpatialMesh, degree: int, dirichlet: dict | None,
                      time: float, dof_handler: DoFHandler | None = None) -> ConstraintSet:
    """Hanging-node and Dirichlet constraints for one spatial space.

    ``dirichlet`` maps boundary colors to callables ``g(x, y, t)``; faces with
    other colors stay unconstrained (natural boundary). ``time`` is the
    physical time at which Dirichlet data is evaluated (one set per temporal
    degree of freedom in space-time systems).
    """
    h = dof_handler if dof_handler is not None else get_handler(mesh, degree)
    cs = hanging_constraints(mesh, degree, h).copy()
    # Dirichlet overrides hanging rows
    if dirichlet:
        for c, side, color in boundary_faces_cached(mesh):
            g = dirichlet.get(color)
            if g is None:
                continue
            for dof in h.dofs_on_side(c, side):
                x, y = h.node_coords[dof]
                cs.add(dof, [], float(g(x, y, time)), overwrite=True)
    return cs.close()
