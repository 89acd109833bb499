"""Space-time tensor-product systems on a single slab.

Global ids follow the space-major rule ``gid = space_id + n_space * time_id``
with temporal dofs ordered cell by cell (time_id 0 is the earliest Gauss
node of the first temporal cell). The primal bilinear form couples each
temporal cell to its predecessor through the jump trace, producing one
sub-diagonal block per interior face; the dual system is its transpose, so
the coupling moves to the super-diagonal.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp

from .dofs import ConstraintSet, DoFHandler
from .slabs import Slab

__all__ = [
    "SlabDoFMap",
    "build_slab_dofs",
    "extend_constraints",
    "spatial_pattern",
    "SpaceTimeSparsity",
    "build_sparsity",
    "COOBuilder",
    "scatter_local",
]


@dataclasses.dataclass
class SlabDoFMap:
    """Index bookkeeping for one slab's tensor-product space."""

    n_space: int
    n_time_cells: int
    time_degree: int
    time_dof_times: np.ndarray

    @property
    def n_time(self) -> int:
        return (self.time_degree + 1) * self.n_time_cells

    @property
    def n_total(self) -> int:
        return self.n_space * self.n_time

    def gid(self, space_id, time_id):
        return np.asarray(space_id) + self.n_space * np.asarray(time_id)

    def time_cell_of(self, time_id: int) -> int:
        return time_id // (self.time_degree + 1)

    def time_ids_of_cell(self, k: int) -> np.ndarray:
        r1 = self.time_degree + 1
        return np.arange(k * r1, (k + 1) * r1)


def build_slab_dofs(slab: Slab, handler: DoFHandler) -> SlabDoFMap:
    return SlabDoFMap(handler.n_dofs, slab.n_cells, slab.time_degree, slab.dof_times())


def extend_constraints(constraints, dofmap: SlabDoFMap) -> dict:
    """Replicate spatial constraints across temporal dofs with shifted ids.

    ``constraints`` is either one :class:`ConstraintSet` (reused for every
    temporal dof; correct when Dirichlet data is time-independent) or a list
    with one set per temporal dof, e.g. built at each dof's physical time.
    """
    if isinstance(constraints, ConstraintSet):
        sets = [constraints] * dofmap.n_time
    else:
        sets = list(constraints)
        if len(sets) != dofmap.n_time:
            raise ValueError("need one constraint set per temporal dof")
    ns = dofmap.n_space
    out: dict[int, tuple[list[tuple[int, float]], float]] = {}
    for a, cs in enumerate(sets):
        shift = a * ns
        for dof, (masters, g) in cs.rows.items():
            out[dof + shift] = ([(m + shift, w) for m, w in masters], g)
    return out


def spatial_pattern(handler: DoFHandler) -> sp.csr_matrix:
    """Boolean cell-coupling pattern of the scalar spatial space."""
    nl = handler.cell_dofs.shape[1]
    rows = np.repeat(handler.cell_dofs, nl, axis=1).ravel()
    cols = np.tile(handler.cell_dofs, (1, nl)).ravel()
    pat = sp.coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)),
                        shape=(handler.n_dofs, handler.n_dofs)).tocsr()
    pat.data[:] = 1
    return pat


@dataclasses.dataclass
class SpaceTimeSparsity:
    """Predicted block pattern: temporal diagonal plus jump couplings."""

    dofmap: SlabDoFMap
    spat: sp.csr_matrix
    direction: str = "primal"  # couplings below ("primal") or above ("dual")

    def coupling_blocks(self) -> list[tuple[int, int]]:
        m = self.dofmap.n_time_cells
        if self.direction == "primal":
            return [(k, k - 1) for k in range(1, m)]
        return [(k - 1, k) for k in range(1, m)]

    def materialize(self) -> sp.csr_matrix:
        """Expand the block prediction to an explicit boolean matrix."""
        r1 = self.dofmap.time_degree + 1
        ns = self.dofmap.n_space
        coo = self.spat.tocoo()
        rows, cols, prows, pcols = [], [], coo.row, coo.col
        blocks = [(k, k) for k in range(self.dofmap.n_time_cells)] + self.coupling_blocks()
        for (kr, kc) in blocks:
            for a in range(kr * r1, (kr + 1) * r1):
                for b in range(kc * r1, (kc + 1) * r1):
                    rows.append(prows + a * ns)
                    cols.append(pcols + b * ns)
        n = self.dofmap.n_total
        pat = sp.coo_matrix((np.ones(sum(len(r) for r in rows), dtype=np.int8),
                             (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
        pat.data[:] = 1
        return pat

    def nnz(self) -> int:
        nblocks = self.dofmap.n_time_cells + len(self.coupling_blocks())
        return nblocks * (self.dofmap.time_degree + 1) ** 2 * self.spat.nnz


def build_sparsity(dofmap: SlabDoFMap, handler: DoFHandler, direction: str = "primal") -> SpaceTimeSparsity:
    if direction not in ("primal", "dual"):
        raise ValueError("direction must be 'primal' or 'dual'")
    return SpaceTimeSparsity(dofmap, spatial_pattern(handler), direction)


class COOBuilder:
    """Accumulates triplets for one slab system; duplicates are summed.

    ``direction='dual'`` transposes every scatter, which realizes the adjoint
    system without a separate assembly routine.
    """

    def __init__(self, n: int, direction: str = "primal"):
        self.n = n
        self.direction = direction
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows).ravel()
        cols = np.asarray(cols).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if self.direction == "dual":
            rows, cols = cols, rows
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(vals)

    def tocsr(self) -> sp.csr_matrix:
        if not self._rows:
            return sp.csr_matrix((self.n, self.n))
        rows = np.concatenate(self._rows)
        cols = np.concatenate(self._cols)
        vals = np.concatenate(self._vals)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)).tocsr()
        A.sum_duplicates()
        return A

    def pattern(self) -> sp.csr_matrix:
        """Structural occupancy (explicit zeros retained)."""
        A = self.tocsr()
        pat = A.copy()
        pat.data = np.ones_like(pat.data, dtype=np.int8)
        return pat


def scatter_local(builder: COOBuilder, block: np.ndarray,
                  test_gids: np.ndarray, trial_gids: np.ndarray):
    """Scatter dense local blocks into the builder.

    ``block`` has shape (..., A, B) with matching leading shapes of
    ``test_gids`` (..., A) and ``trial_gids`` (..., B). Batched over cells.
    """
    block = np.asarray(block, dtype=float)
    test_gids = np.asarray(test_gids)
    trial_gids = np.asarray(trial_gids)
    A, B = block.shape[-2], block.shape[-1]
    rows = np.repeat(test_gids[..., :, None], B, axis=-1)
    cols = np.repeat(trial_gids[..., None, :], A, axis=-2)
    builder.add(rows, cols, block)
