"""Sparse linear systems: constraint condensation and solution.

Condensation folds constrained rows/columns into their masters through the
basis-change matrix C (u = C y + g): the condensed operator is C^T A C with
identity rows on constrained slots, and the inhomogeneity is lifted to the
right-hand side. ``distribute`` reconstructs constrained entries afterwards.

The default solver is a sparse direct factorization; an ILU-preconditioned
GMRES is available for the symmetric-positive-ish transport systems. Saddle
point (flow) systems must use the direct path.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["CondensedSystem", "SolveReport", "condense", "condensed_rhs",
           "constraint_operator", "distribute", "solve", "factorized"]


@dataclasses.dataclass
class CondensedSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    cmat: sp.csr_matrix
    lift: np.ndarray
    constrained: np.ndarray


@dataclasses.dataclass
class SolveReport:
    method: str
    residual: float
    rhs_norm: float
    iterations: int = 0

    @property
    def relative_residual(self) -> float:
        return self.residual / self.rhs_norm if self.rhs_norm > 0 else self.residual


def constraint_operator(n: int, constraints) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """Basis-change matrix C, lift vector, constrained index array.

    ``constraints`` is a ConstraintSet or a plain mapping
    dof -> (masters, inhomogeneity); it must be closed.
    """
    rows_map = constraints.rows if hasattr(constraints, "rows") else constraints
    constrained = np.fromiter(sorted(rows_map.keys()), dtype=np.int64, count=len(rows_map))
    lift = np.zeros(n)
    rows, cols, vals = [], [], []
    free_mask = np.ones(n, dtype=bool)
    free_mask[constrained] = False
    free = np.nonzero(free_mask)[0]
    rows.append(free)
    cols.append(free)
    vals.append(np.ones(len(free)))
    for dof, (masters, g) in rows_map.items():
        lift[dof] = g
        for m, w in masters:
            if m in rows_map:
                raise ValueError(f"constraints not closed: master {m} of dof {dof} is constrained")
            rows.append(np.array([dof]))
            cols.append(np.array([m]))
            vals.append(np.array([w]))
    C = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    return C, lift, constrained


def condense(A: sp.spmatrix, b: np.ndarray, constraints) -> CondensedSystem:
    """Eliminate constrained dofs symmetrically.

    ``constraints`` is a ConstraintSet or a closed mapping
    dof -> (masters, inhomogeneity).
    """
    n = A.shape[0]
    b = np.asarray(b, dtype=float)
    C, lift, constrained = constraint_operator(n, constraints)
    A = A.tocsr()
    # column/row `dof` of C are empty for constrained dofs, so padding the
    # diagonal with ones keeps the reduced operator invertible
    pad = sp.csr_matrix((np.ones(len(constrained)), (constrained, constrained)), shape=(n, n))
    Ac = (C.T @ A @ C) + pad
    bc = C.T @ (b - A @ lift)
    bc[constrained] = 0.0
    return CondensedSystem(Ac.tocsr(), bc, C, lift, constrained)


def condensed_rhs(system: CondensedSystem, A: sp.spmatrix, b: np.ndarray,
                  lift: np.ndarray | None = None) -> np.ndarray:
    """Reduced right-hand side for a new load/lift with unchanged structure.

    Supports reuse of one factorization across systems that differ only in
    right-hand side or inhomogeneous constraint values.
    """
    g = system.lift if lift is None else lift
    bc = system.cmat.T @ (b - A @ g)
    bc[system.constrained] = 0.0
    return bc


def distribute(y: np.ndarray, system: CondensedSystem) -> np.ndarray:
    """Recover the full vector including constrained entries."""
    return system.cmat @ y + system.lift


def solve(system: CondensedSystem, method: str = "direct",
          rtol: float = 1e-10) -> tuple[np.ndarray, SolveReport]:
    """Solve the condensed system and report the discrete residual."""
    A, b = system.matrix, system.rhs
    if method == "direct":
        lu = spla.splu(A.tocsc())
        y = lu.solve(b)
        iters = 0
    elif method == "gmres":
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve)
        counter = _IterCounter()
        y, info = spla.gmres(A, b, M=M, rtol=rtol, atol=0.0, maxiter=2000,
                             callback=counter, callback_type="pr_norm")
        if info != 0:
            raise RuntimeError(f"GMRES failed to converge (info={info})")
        iters = counter.n
    else:
        raise ValueError(f"unknown solver method {method!r}")
    res = float(np.max(np.abs(b - A @ y))) if len(b) else 0.0
    rep = SolveReport(method, res, float(np.max(np.abs(b))) if len(b) else 0.0, iters)
    return y, rep


class _IterCounter:
    def __init__(self):
        self.n = 0

    def __call__(self, _):
        self.n += 1


def factorized(A: sp.spmatrix):
    """Reusable direct factorization for many right-hand sides."""
    return spla.splu(A.tocsc())
