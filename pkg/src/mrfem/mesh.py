"""Quadtree quadrilateral meshes over unions of axis-aligned rectangles.

Cells form a forest: the roots are the structured coarse cells of each
rectangle, refinement is isotropic 1:4, and coarsening reverts a full sibling
group. Active cells (the leaves) always satisfy 1-irregularity: two active
cells sharing an edge differ by at most one level. ``refine_and_coarsen``
enforces this by expanding the refinement set (smoothing) and by vetoing
coarsening that would break it; all silent adjustments are reported in a
change log.

Meshes are immutable after construction; adaptation returns a new mesh.
"""

from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np

__all__ = [
    "Rectangle",
    "BoundarySegment",
    "GeometrySpec",
    "SpatialMesh",
    "ChangeLog",
    "build_coarse_mesh",
    "refine_and_coarsen",
    "uniform_refine",
]

_COORD_DECIMALS = 10
_uid_counter = itertools.count(1)

# side numbering: 0 south, 1 east, 2 north, 3 west
_OPPOSITE = (2, 3, 0, 1)
# child numbering within a parent: 0 SW, 1 SE, 2 NE, 3 NW
# sibling moves that stay inside the parent: (side, child) -> sibling child
_SIBLING = {
    (0, 2): 1, (0, 3): 0,
    (1, 0): 1, (1, 3): 2,
    (2, 0): 3, (2, 1): 2,
    (3, 1): 0, (3, 2): 3,
}
# crossing out of the parent: which child of the parent's neighbor is entered
_ENTER = {
    (0, 0): 3, (0, 1): 2,
    (1, 1): 0, (1, 2): 3,
    (2, 3): 0, (2, 2): 1,
    (3, 0): 1, (3, 3): 2,
}
# children of a refined neighbor that face back across side s, ordered along
# the edge (+x for horizontal edges, +y for vertical ones)
_FACING = {0: (3, 2), 1: (0, 3), 2: (0, 1), 3: (1, 2)}


def _key(x: float, y: float) -> tuple[float, float]:
    return (round(float(x), _COORD_DECIMALS), round(float(y), _COORD_DECIMALS))


@dataclasses.dataclass(frozen=True)
class Rectangle:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("degenerate rectangle")


@dataclasses.dataclass(frozen=True)
class BoundarySegment:
    """Axis-aligned boundary segment carrying a color tag."""

    color: str
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float, tol: float = 1e-9) -> bool:
        if abs(self.x1 - self.x0) < tol:  # vertical
            return abs(x - self.x0) <= tol and min(self.y0, self.y1) - tol <= y <= max(self.y0, self.y1) + tol
        return abs(y - self.y0) <= tol and min(self.x0, self.x1) - tol <= x <= max(self.x0, self.x1) + tol


@dataclasses.dataclass(frozen=True)
class GeometrySpec:
    """Domain description: rectangles plus colored boundary segments.

    Later segments take precedence where they overlap, so a coarse default
    (e.g. a wall color covering the whole outline) can be listed first and
    specific pieces (inflow, outflow) afterwards.
    """

    rectangles: tuple[Rectangle, ...]
    segments: tuple[BoundarySegment, ...]


@dataclasses.dataclass
class ChangeLog:
    """What ``refine_and_coarsen`` actually did versus what was requested."""

    refined: list[int] = dataclasses.field(default_factory=list)
    extra_refined: list[int] = dataclasses.field(default_factory=list)
    coarsened_parents: list[int] = dataclasses.field(default_factory=list)
    coarsen_dropped: list[int] = dataclasses.field(default_factory=list)


class SpatialMesh:
    """Immutable quadtree mesh. Construct via :func:`build_coarse_mesh`."""

    def __init__(self, verts, vkey, cell_verts, cell_level, cell_parent,
                 cell_child0, cell_active, rect_info, coarse_neighbors,
                 geometry: GeometrySpec):
        self.verts = np.asarray(verts, dtype=float)
        self._vkey = vkey
        self.cell_verts = np.asarray(cell_verts, dtype=np.int64)
        self.cell_level = np.asarray(cell_level, dtype=np.int32)
        self.cell_parent = np.asarray(cell_parent, dtype=np.int64)
        self.cell_child0 = np.asarray(cell_child0, dtype=np.int64)
        self.cell_active = np.asarray(cell_active, dtype=bool)
        self.rect_info = rect_info
        self.coarse_neighbors = np.asarray(coarse_neighbors, dtype=np.int64)
        self.geometry = geometry
        self.uid = next(_uid_counter)
        self._freeze()

    def _freeze(self):
        self.active_cells = np.nonzero(self.cell_active)[0]
        ll = self.verts[self.cell_verts[:, 0]]
        ur = self.verts[self.cell_verts[:, 2]]
        self.cell_x0, self.cell_y0 = ll[:, 0], ll[:, 1]
        self.cell_x1, self.cell_y1 = ur[:, 0], ur[:, 1]
        self._tol = 1e-12 * max(
            max(abs(r.x0), abs(r.x1), abs(r.y0), abs(r.y1), r.x1 - r.x0, r.y1 - r.y0)
            for r in self.geometry.rectangles
        )

    # -- basic queries ---------------------------------------------------

    @property
    def n_active(self) -> int:
        return len(self.active_cells)

    def cell_box(self, c: int) -> tuple[float, float, float, float]:
        return (self.cell_x0[c], self.cell_y0[c], self.cell_x1[c], self.cell_y1[c])

    def cell_size(self, c: int) -> tuple[float, float]:
        return (self.cell_x1[c] - self.cell_x0[c], self.cell_y1[c] - self.cell_y0[c])

    def cell_corners(self, c: int) -> np.ndarray:
        return self.verts[self.cell_verts[c]]

    def side_verts(self, c: int, side: int) -> tuple[int, int]:
        """Vertex ids of a side, ordered along +x (S/N) or +y (W/E)."""
        v = self.cell_verts[c]
        return ((v[0], v[1]), (v[1], v[2]), (v[3], v[2]), (v[0], v[3]))[side]

    def total_area(self) -> float:
        a = self.active_cells
        return float(np.sum((self.cell_x1[a] - self.cell_x0[a]) * (self.cell_y1[a] - self.cell_y0[a])))

    def is_uniform(self) -> bool:
        lv = self.cell_level[self.active_cells]
        return bool(np.all(lv == lv[0]))

    # -- neighbor walks --------------------------------------------------

    def neighbor(self, c: int, side: int) -> int:
        """Tree-walk neighbor across a side at the same or coarser level.

        Returns -1 on the domain boundary. The returned cell may be inactive
        (refined further toward us); use :meth:`active_neighbors` for leaves.
        """
        parent = self.cell_parent[c]
        if parent < 0:
            return self.coarse_neighbors[c, side]
        pos = c - self.cell_child0[parent]
        sib = _SIBLING.get((side, pos))
        if sib is not None:
            return self.cell_child0[parent] + sib
        pn = self.neighbor(parent, side)
        if pn < 0:
            return -1
        if self.cell_child0[pn] < 0:
            return pn
        return self.cell_child0[pn] + _ENTER[(side, pos)]

    def active_neighbors(self, c: int, side: int) -> list[int]:
        """Active cells sharing (part of) the given side; [] on the boundary."""
        n = self.neighbor(c, side)
        if n < 0:
            return []
        if self.cell_active[n]:
            return [n]
        out: list[int] = []
        stack = [self.cell_child0[n] + k for k in _FACING[side]]
        while stack:
            m = stack.pop()
            if self.cell_active[m]:
                out.append(m)
            elif self.cell_child0[m] >= 0:
                stack.extend(self.cell_child0[m] + k for k in _FACING[side])
        return sorted(out)

    def is_boundary_face(self, c: int, side: int) -> bool:
        return self.neighbor(c, side) < 0

    def boundary_color(self, c: int, side: int) -> str:
        """Color of a boundary face, from the last matching geometry segment."""
        (va, vb) = self.side_verts(c, side)
        mx, my = (self.verts[va] + self.verts[vb]) / 2.0
        color = None
        for seg in self.geometry.segments:
            if seg.contains(mx, my):
                color = seg.color
        if color is None:
            raise ValueError(f"boundary face of cell {c} side {side} at ({mx}, {my}) has no color")
        return color

    def boundary_faces(self):
        """Yield (cell, side, color) for every boundary face of active cells."""
        for c in self.active_cells:
            for s in range(4):
                if self.is_boundary_face(c, s):
                    yield (int(c), s, self.boundary_color(c, s))

    def check_one_irregular(self) -> bool:
        for c in self.active_cells:
            for s in range(4):
                for n in self.active_neighbors(c, s):
                    if abs(int(self.cell_level[c]) - int(self.cell_level[n])) > 1:
                        return False
        return True

    # -- point location --------------------------------------------------

    def _coarse_candidates(self, x: float, y: float) -> list[int]:
        tol = self._tol
        out = []
        for info in self.rect_info:
            if not (info["x0"] - tol <= x <= info["x1"] + tol and info["y0"] - tol <= y <= info["y1"] + tol):
                continue
            hx, hy = info["hx"], info["hy"]
            iset = {min(max(int(math.floor((x - info["x0"] + s * tol) / hx)), 0), info["nx"] - 1) for s in (-1.0, 1.0)}
            jset = {min(max(int(math.floor((y - info["y0"] + s * tol) / hy)), 0), info["ny"] - 1) for s in (-1.0, 1.0)}
            for j in jset:
                for i in iset:
                    out.append(info["offset"] + j * info["nx"] + i)
        return out

    def locate_point(self, x) -> tuple[int, np.ndarray]:
        """Active cell containing x (lowest id on ties) and local coordinates.

        Raises ``ValueError`` for points outside the domain (beyond a
        1e-12-scale tolerance).
        """
        px, py = float(x[0]), float(x[1])
        tol = self._tol
        hits: list[int] = []
        stack = self._coarse_candidates(px, py)
        while stack:
            c = stack.pop()
            if not (self.cell_x0[c] - tol <= px <= self.cell_x1[c] + tol
                    and self.cell_y0[c] - tol <= py <= self.cell_y1[c] + tol):
                continue
            if self.cell_active[c]:
                hits.append(c)
            elif self.cell_child0[c] >= 0:
                stack.extend(self.cell_child0[c] + k for k in range(4))
        if not hits:
            raise ValueError(f"point {x!r} is outside the mesh")
        c = min(hits)
        hx, hy = self.cell_size(c)
        xi = np.clip((px - self.cell_x0[c]) / hx, 0.0, 1.0)
        eta = np.clip((py - self.cell_y0[c]) / hy, 0.0, 1.0)
        return int(c), np.array([xi, eta])

    def locate_batch(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized location for field evaluation.

        Ties on internal faces resolve deterministically (toward the upper /
        right cell), which is value-equivalent for continuous fields; use
        :meth:`locate_point` when the lowest-id contract matters.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(pts)
        cells = np.full(n, -1, dtype=np.int64)
        tol = self._tol
        for info in self.rect_info:
            free = cells < 0
            if not np.any(free):
                break
            m = (free
                 & (pts[:, 0] >= info["x0"] - tol) & (pts[:, 0] <= info["x1"] + tol)
                 & (pts[:, 1] >= info["y0"] - tol) & (pts[:, 1] <= info["y1"] + tol))
            if not np.any(m):
                continue
            i = np.clip(np.floor((pts[m, 0] - info["x0"]) / info["hx"]).astype(np.int64), 0, info["nx"] - 1)
            j = np.clip(np.floor((pts[m, 1] - info["y0"]) / info["hy"]).astype(np.int64), 0, info["ny"] - 1)
            cells[m] = info["offset"] + j * info["nx"] + i
        if np.any(cells < 0):
            bad = pts[cells < 0][0]
            raise ValueError(f"point {bad!r} is outside the mesh")
        # descend to leaves
        while True:
            todo = ~self.cell_active[cells]
            if not np.any(todo):
                break
            cc = cells[todo]
            cx = (self.cell_x0[cc] + self.cell_x1[cc]) / 2.0
            cy = (self.cell_y0[cc] + self.cell_y1[cc]) / 2.0
            right = pts[todo, 0] >= cx
            top = pts[todo, 1] >= cy
            # SW=0, SE=1, NE=2, NW=3
            pos = np.where(top, np.where(right, 2, 3), np.where(right, 1, 0))
            cells[todo] = self.cell_child0[cc] + pos
        hx = self.cell_x1[cells] - self.cell_x0[cells]
        hy = self.cell_y1[cells] - self.cell_y0[cells]
        xi = np.clip((pts[:, 0] - self.cell_x0[cells]) / hx, 0.0, 1.0)
        eta = np.clip((pts[:, 1] - self.cell_y0[cells]) / hy, 0.0, 1.0)
        return cells, np.column_stack([xi, eta])

    # -- internal: mutation happens only while building a new mesh --------

    def _clone_arrays(self):
        return dict(
            verts=[tuple(v) for v in self.verts],
            vkey=dict(self._vkey),
            cell_verts=[tuple(r) for r in self.cell_verts],
            cell_level=list(self.cell_level),
            cell_parent=list(self.cell_parent),
            cell_child0=list(self.cell_child0),
            cell_active=list(self.cell_active),
        )


def locate_point(mesh: SpatialMesh, x):
    return mesh.locate_point(x)


def _vertex_id(data, x: float, y: float) -> int:
    k = _key(x, y)
    vid = data["vkey"].get(k)
    if vid is None:
        vid = len(data["verts"])
        data["verts"].append(k)
        data["vkey"][k] = vid
    return vid


def build_coarse_mesh(geometry: GeometrySpec, target_h: float) -> SpatialMesh:
    """Structured coarse mesh with square cells of side ``target_h``.

    ``target_h`` must divide every rectangle side; rectangles sharing an edge
    are merged conformingly through shared vertices.
    """
    if target_h <= 0:
        raise ValueError("target_h must be positive")
    data = dict(verts=[], vkey={}, cell_verts=[], cell_level=[], cell_parent=[],
                cell_child0=[], cell_active=[])
    rect_info = []
    for rect in geometry.rectangles:
        nx = (rect.x1 - rect.x0) / target_h
        ny = (rect.y1 - rect.y0) / target_h
        if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9:
            raise ValueError(f"target_h={target_h} does not divide rectangle {rect}")
        nx, ny = int(round(nx)), int(round(ny))
        xs = np.linspace(rect.x0, rect.x1, nx + 1)
        ys = np.linspace(rect.y0, rect.y1, ny + 1)
        vid = np.empty((ny + 1, nx + 1), dtype=np.int64)
        for j in range(ny + 1):
            for i in range(nx + 1):
                vid[j, i] = _vertex_id(data, xs[i], ys[j])
        offset = len(data["cell_verts"])
        rect_info.append(dict(x0=rect.x0, y0=rect.y0, x1=rect.x1, y1=rect.y1,
                              nx=nx, ny=ny, hx=(rect.x1 - rect.x0) / nx,
                              hy=(rect.y1 - rect.y0) / ny, offset=offset))
        for j in range(ny):
            for i in range(nx):
                data["cell_verts"].append((vid[j, i], vid[j, i + 1], vid[j + 1, i + 1], vid[j + 1, i]))
                data["cell_level"].append(0)
                data["cell_parent"].append(-1)
                data["cell_child0"].append(-1)
                data["cell_active"].append(True)
    n_coarse = len(data["cell_verts"])
    neighbors = np.full((n_coarse, 4), -1, dtype=np.int64)
    for info in rect_info:
        nx, ny, off = info["nx"], info["ny"], info["offset"]
        for j in range(ny):
            for i in range(nx):
                c = off + j * nx + i
                if j > 0:
                    neighbors[c, 0] = c - nx
                if i < nx - 1:
                    neighbors[c, 1] = c + 1
                if j < ny - 1:
                    neighbors[c, 2] = c + nx
                if i > 0:
                    neighbors[c, 3] = c - 1
    # stitch rectangles through shared faces (vertex-pair keyed)
    open_faces: dict[tuple[int, int], tuple[int, int]] = {}
    for c in range(n_coarse):
        for s in range(4):
            if neighbors[c, s] >= 0:
                continue
            cv = data["cell_verts"][c]
            va, vb = ((cv[0], cv[1]), (cv[1], cv[2]), (cv[3], cv[2]), (cv[0], cv[3]))[s]
            k = (min(va, vb), max(va, vb))
            if k in open_faces:
                c2, s2 = open_faces.pop(k)
                neighbors[c, s] = c2
                neighbors[c2, s2] = c
            else:
                open_faces[k] = (c, s)
    return SpatialMesh(data["verts"], data["vkey"], data["cell_verts"], data["cell_level"],
                       data["cell_parent"], data["cell_child0"], data["cell_active"],
                       rect_info, neighbors, geometry)


def _expand_refine_set(mesh: SpatialMesh, flagged: set[int]) -> set[int]:
    """Grow the refinement set until 1-irregularity survives refining it."""
    out = set(flagged)
    work = list(flagged)
    while work:
        c = work.pop()
        for s in range(4):
            for n in mesh.active_neighbors(c, s):
                if mesh.cell_level[n] < mesh.cell_level[c] and n not in out:
                    out.add(n)
                    work.append(n)
    return out


def _max_adjacent_level(mesh: SpatialMesh, cell: int, side: int, refine_set: set[int]) -> int:
    level = -1
    for n in mesh.active_neighbors(cell, side):
        lv = int(mesh.cell_level[n]) + (1 if n in refine_set else 0)
        level = max(level, lv)
    return level


def refine_and_coarsen(mesh: SpatialMesh, refine_flags, coarsen_flags) -> tuple[SpatialMesh, ChangeLog]:
    """Apply refinement (with smoothing) and conservative coarsening.

    Refinement wins over coarsening; coarsening requires all four siblings
    flagged and must not break 1-irregularity. Returns the new mesh plus a
    log of silent adjustments.
    """
    log = ChangeLog()
    refine = {int(c) for c in refine_flags}
    for c in refine:
        if not mesh.cell_active[c]:
            raise ValueError(f"cannot refine inactive cell {c}")
    expanded = _expand_refine_set(mesh, refine)
    log.refined = sorted(refine)
    log.extra_refined = sorted(expanded - refine)

    coarsen = {int(c) for c in coarsen_flags if mesh.cell_active[c]}
    groups: dict[int, list[int]] = {}
    dropped: set[int] = set()
    for c in coarsen:
        if c in expanded:
            dropped.add(c)
            continue
        p = int(mesh.cell_parent[c])
        if p < 0:
            dropped.add(c)
            continue
        groups.setdefault(p, []).append(c)
    accepted_parents = []
    for p, kids in sorted(groups.items()):
        sibs = [int(mesh.cell_child0[p]) + k for k in range(4)]
        ok = (len(kids) == 4
              and all(mesh.cell_active[s] for s in sibs)
              and not any(s in expanded for s in sibs))
        if ok:
            # the coarsened parent must not end up two levels below a neighbor
            plevel = int(mesh.cell_level[p])
            for s in range(4):
                if _max_adjacent_level(mesh, p, s, expanded) > plevel + 1:
                    ok = False
                    break
        if ok:
            accepted_parents.append(p)
        else:
            dropped.update(kids)
    log.coarsen_dropped = sorted(dropped)
    log.coarsened_parents = accepted_parents

    data = mesh._clone_arrays()
    for p in accepted_parents:
        c0 = int(mesh.cell_child0[p])
        for k in range(4):
            data["cell_active"][c0 + k] = False
        data["cell_child0"][p] = -1
        data["cell_active"][p] = True
    for c in sorted(expanded):
        x0, y0, x1, y1 = mesh.cell_box(c)
        xm, ym = _key((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        vll, vlr, vur, vul = data["cell_verts"][c]
        vs = _vertex_id(data, xm, y0)
        ve = _vertex_id(data, x1, ym)
        vn = _vertex_id(data, xm, y1)
        vw = _vertex_id(data, x0, ym)
        vc = _vertex_id(data, xm, ym)
        child0 = len(data["cell_verts"])
        for quad in ((vll, vs, vc, vw), (vs, vlr, ve, vc), (vc, ve, vur, vn), (vw, vc, vn, vul)):
            data["cell_verts"].append(quad)
            data["cell_level"].append(int(mesh.cell_level[c]) + 1)
            data["cell_parent"].append(c)
            data["cell_child0"].append(-1)
            data["cell_active"].append(True)
        data["cell_child0"][c] = child0
        data["cell_active"][c] = False
    new = SpatialMesh(data["verts"], data["vkey"], data["cell_verts"], data["cell_level"],
                      data["cell_parent"], data["cell_child0"], data["cell_active"],
                      mesh.rect_info, mesh.coarse_neighbors, mesh.geometry)
    return new, log


def uniform_refine(mesh: SpatialMesh, times: int = 1) -> SpatialMesh:
    for _ in range(times):
        mesh, _ = refine_and_coarsen(mesh, mesh.active_cells, [])
    return mesh
