"""Reference-element toolbox: quadrature, Lagrange bases, cell mappings.

Everything here lives on the unit reference cell [0,1] (1D) or [0,1]^2 (2D).
Spatial elements are tensor-product Lagrange (Q_p) on equispaced nodes; the
temporal basis for dG(r) is Lagrange on the r+1 Gauss-Legendre points, which
makes the temporal mass matrix diagonal under the matching rule.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import roots_jacobi

__all__ = [
    "QuadratureRule",
    "gauss_rule",
    "gauss_lobatto_rule",
    "Lagrange1D",
    "SpaceBasis",
    "TimeBasis",
    "TimeCellBlocks",
    "time_cell_blocks",
    "map_cell",
    "CellMap",
]


@dataclasses.dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on [0,1]. Weights sum to 1."""

    name: str
    points: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def gauss_rule(n: int) -> QuadratureRule:
    """Gauss-Legendre rule with n points on [0,1]; exact through degree 2n-1."""
    if n < 1:
        raise ValueError("need at least one quadrature point")
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule("gauss", (x + 1.0) / 2.0, w / 2.0)


def gauss_lobatto_rule(n: int) -> QuadratureRule:
    """Gauss-Lobatto rule with n >= 2 points on [0,1]; exact through degree 2n-3.

    Includes both endpoints. Interior nodes are the roots of P'_{n-1}, obtained
    as Jacobi(1,1) roots; weights use the classical closed form.
    """
    if n < 2:
        raise ValueError("Gauss-Lobatto needs at least two points")
    if n == 2:
        x = np.array([-1.0, 1.0])
    else:
        xi, _ = roots_jacobi(n - 2, 1.0, 1.0)
        x = np.concatenate([[-1.0], np.sort(xi), [1.0]])
    # w_i = 2 / (n (n-1) P_{n-1}(x_i)^2) on [-1,1]
    legvals = np.polynomial.legendre.legval(x, [0.0] * (n - 1) + [1.0])
    w = 2.0 / (n * (n - 1) * legvals**2)
    return QuadratureRule("gauss-lobatto", (x + 1.0) / 2.0, w / 2.0)


class Lagrange1D:
    """Lagrange basis on arbitrary distinct nodes in [0,1]."""

    def __init__(self, nodes):
        self.nodes = np.asarray(nodes, dtype=float)
        self.n = len(self.nodes)
        if self.n != len(set(np.round(self.nodes, 14))):
            raise ValueError("nodes must be distinct")

    def eval(self, x) -> np.ndarray:
        """Values; shape (len(x), n)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.ones((len(x), self.n))
        for j in range(self.n):
            for k in range(self.n):
                if k != j:
                    out[:, j] *= (x - self.nodes[k]) / (self.nodes[j] - self.nodes[k])
        return out

    def deriv(self, x) -> np.ndarray:
        """First derivatives; shape (len(x), n)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros((len(x), self.n))
        for j in range(self.n):
            for m in range(self.n):
                if m == j:
                    continue
                term = np.full(len(x), 1.0 / (self.nodes[j] - self.nodes[m]))
                for k in range(self.n):
                    if k != j and k != m:
                        term *= (x - self.nodes[k]) / (self.nodes[j] - self.nodes[k])
                out[:, j] += term
        return out

    def deriv2(self, x) -> np.ndarray:
        """Second derivatives; shape (len(x), n)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.zeros((len(x), self.n))
        for j in range(self.n):
            for m in range(self.n):
                if m == j:
                    continue
                for l in range(self.n):
                    if l == j or l == m:
                        continue
                    term = np.full(
                        len(x),
                        1.0 / ((self.nodes[j] - self.nodes[m]) * (self.nodes[j] - self.nodes[l])),
                    )
                    for k in range(self.n):
                        if k not in (j, m, l):
                            term *= (x - self.nodes[k]) / (self.nodes[j] - self.nodes[k])
                    out[:, j] += term
        return out


class SpaceBasis:
    """Tensor-product Q_p Lagrange basis on [0,1]^2, equispaced nodes.

    Local ordering is lexicographic with x fastest: dof = iy*(p+1) + ix.
    """

    def __init__(self, degree: int):
        if degree < 1:
            raise ValueError("spatial degree must be >= 1")
        self.degree = degree
        self.nodes_1d = np.linspace(0.0, 1.0, degree + 1)
        self._b1 = Lagrange1D(self.nodes_1d)
        self.n_dofs = (degree + 1) ** 2
        # reference node coordinates, same ordering
        gx, gy = np.meshgrid(self.nodes_1d, self.nodes_1d)
        self.nodes = np.column_stack([gx.ravel(), gy.ravel()])

    def eval(self, xi, eta) -> np.ndarray:
        """Values at points; shape (npts, n_dofs)."""
        vx = self._b1.eval(xi)
        vy = self._b1.eval(eta)
        return np.einsum("pi,pj->pji", vx, vy).reshape(len(vx), -1)

    def grad(self, xi, eta) -> np.ndarray:
        """Reference gradients; shape (npts, n_dofs, 2)."""
        vx, vy = self._b1.eval(xi), self._b1.eval(eta)
        dx, dy = self._b1.deriv(xi), self._b1.deriv(eta)
        gx = np.einsum("pi,pj->pji", dx, vy).reshape(len(vx), -1)
        gy = np.einsum("pi,pj->pji", vx, dy).reshape(len(vx), -1)
        return np.stack([gx, gy], axis=-1)

    def second(self, xi, eta) -> tuple[np.ndarray, np.ndarray]:
        """Pure reference second derivatives (d2/dxi2, d2/deta2)."""
        vx, vy = self._b1.eval(xi), self._b1.eval(eta)
        d2x, d2y = self._b1.deriv2(xi), self._b1.deriv2(eta)
        sxx = np.einsum("pi,pj->pji", d2x, vy).reshape(len(vx), -1)
        syy = np.einsum("pi,pj->pji", vx, d2y).reshape(len(vx), -1)
        return sxx, syy


class TimeBasis:
    """Nodal dG(r) basis on [0,1]: Lagrange at the r+1 Gauss-Legendre points."""

    def __init__(self, order: int):
        if order < 0:
            raise ValueError("temporal order must be >= 0")
        self.order = order
        self.nodes = gauss_rule(order + 1).points
        self._b = Lagrange1D(self.nodes)
        self.n_dofs = order + 1

    def eval(self, t) -> np.ndarray:
        return self._b.eval(t)

    def deriv(self, t) -> np.ndarray:
        return self._b.deriv(t)

    def at_left(self) -> np.ndarray:
        """Basis values at the left endpoint 0 (used for jump traces)."""
        return self.eval([0.0])[0]

    def at_right(self) -> np.ndarray:
        return self.eval([1.0])[0]


@dataclasses.dataclass(frozen=True)
class TimeCellBlocks:
    """Reference temporal matrices of one dG(r) cell on [0,1].

    With the nodal basis at Gauss points, the temporal mass matrix under the
    native r+1 point rule is diagonal with the Gauss weights, so stiffness-type
    contributions are carried by ``weights`` alone; ``dt[a, b]`` holds the
    exactly integrated derivative coupling (theta_a, theta_b').
    """

    order: int
    weights: np.ndarray       # (r+1,) Gauss weights = diagonal temporal mass
    dt: np.ndarray            # (r+1, r+1) int theta_a theta_b'
    theta_left: np.ndarray    # (r+1,) values at 0^+
    theta_right: np.ndarray   # (r+1,) values at 1^-
    force_points: np.ndarray  # (r+2,) Gauss nodes for data terms
    force_weights: np.ndarray
    theta_force: np.ndarray   # (r+2, r+1) basis values at force_points


_time_blocks_cache: dict[int, TimeCellBlocks] = {}


def time_cell_blocks(order: int) -> TimeCellBlocks:
    if order not in _time_blocks_cache:
        tb = TimeBasis(order)
        rule = gauss_rule(order + 1)
        dt = np.einsum("q,qa,qb->ab", rule.weights, tb.eval(rule.points),
                       tb.deriv(rule.points))
        frule = gauss_rule(order + 2)
        _time_blocks_cache[order] = TimeCellBlocks(
            order, rule.weights.copy(), dt, tb.at_left(), tb.at_right(),
            frule.points.copy(), frule.weights.copy(), tb.eval(frule.points))
    return _time_blocks_cache[order]


@dataclasses.dataclass
class CellMap:
    """Bilinear map from [0,1]^2 to a (convex) quadrilateral."""

    corners: np.ndarray  # (4,2) counterclockwise: LL, LR, UR, UL

    _Q1 = SpaceBasis(1)

    def forward(self, xi, eta) -> np.ndarray:
        # Q1 local ordering is (LL, LR, UL, UR); reorder ccw corners accordingly
        vals = self._Q1.eval(np.atleast_1d(xi), np.atleast_1d(eta))
        c = self.corners[[0, 1, 3, 2]]
        return vals @ c

    def jacobian(self, xi, eta) -> np.ndarray:
        grads = self._Q1.grad(np.atleast_1d(xi), np.atleast_1d(eta))
        c = self.corners[[0, 1, 3, 2]]
        # J[p, i, j] = d x_i / d xi_j
        return np.einsum("pkj,ki->pij", grads, c)

    def inverse(self, x, tol: float = 1e-13, maxit: int = 50) -> np.ndarray:
        """Newton inversion of the bilinear map; x shape (npts, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.full(len(x), 0.5)
        eta = np.full(len(x), 0.5)
        for _ in range(maxit):
            r = self.forward(xi, eta) - x
            if np.max(np.abs(r)) < tol:
                break
            J = self.jacobian(xi, eta)
            upd = np.linalg.solve(J, r[:, :, None])[:, :, 0]
            xi -= upd[:, 0]
            eta -= upd[:, 1]
        return np.column_stack([xi, eta])


def map_cell(corners) -> CellMap:
    """Build the bilinear map for a quadrilateral given ccw corners (4,2)."""
    corners = np.asarray(corners, dtype=float)
    if corners.shape != (4, 2):
        raise ValueError("expected four 2D corners")
    return CellMap(corners)
