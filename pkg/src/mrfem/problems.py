"""Benchmark problem library.

Closed-form manufactured data for the coupled flow-transport benchmarks (a
swirling vortex Stokes flow and a rotating cone concentration profile), the
constricted-channel scenario, space-time L2(L2) norms, experimental
convergence orders, goal functional evaluation, and the characteristic time
scales that motivate the multirate splitting. All hand-derived forcings are
guarded by finite-difference residual checks exposed here and exercised in
the test suite.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable

import numpy as np

from .fem import TimeBasis, gauss_rule
from .fields import FlowSolution, quad_batch
from .mesh import BoundarySegment, GeometrySpec, Rectangle
from .stokes import FlowCoefficients
from .transport import SlabwiseSolution, TransportCoefficients

__all__ = [
    "ProblemDefinition",
    "swirl_velocity", "swirl_pressure", "swirl_forcing",
    "cone_center", "cone_value", "cone_forcing",
    "rotating_cone_problem", "channel_problem", "channel_inflow",
    "l2l2_error", "eoc", "goal_value", "goal_error",
    "characteristic_times",
    "divergence_residual", "transport_residual", "flow_residual",
]

_PI = math.pi


@dataclasses.dataclass
class ProblemDefinition:
    """A complete coupled benchmark scenario.

    Geometry (with boundary colors) is carried separately for the transport
    and the flow subproblem since their triangulations evolve independently.
    ``mesh_size`` entries are the coarse cell sides handed to
    :func:`mrfem.mesh.build_coarse_mesh`. Analytic fields are ``None`` for
    scenarios without closed-form solutions. ``length_scale`` and
    ``velocity_scale`` feed :func:`characteristic_times`.
    """

    name: str
    geometry_transport: GeometrySpec
    geometry_flow: GeometrySpec
    transport: TransportCoefficients
    flow: FlowCoefficients
    final_time: float
    mesh_size_transport: float
    mesh_size_flow: float
    length_scale: float = 1.0
    velocity_scale: float = 1.0
    exact_u: Callable | None = None
    exact_v: Callable | None = None
    exact_p: Callable | None = None


# -- manufactured flow: counterrotating vortex pair, no-slip walls ----------

def swirl_velocity(x, y, t):
    """Divergence-free velocity vanishing on the unit-square boundary."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = np.sin(t)
    vx = s * np.sin(_PI * x) ** 2 * np.sin(_PI * y) * np.cos(_PI * y)
    vy = -s * np.sin(_PI * x) * np.cos(_PI * x) * np.sin(_PI * y) ** 2
    return vx, vy


def swirl_pressure(x, y, t):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return 0.25 * np.sin(t) * np.sin(2 * _PI * x) * np.sin(2 * _PI * y)


def swirl_forcing(nu: float) -> Callable:
    """Body force reproducing the swirl velocity/pressure pair.

    Derived from the momentum balance dt v - nu lap v + grad p under the
    solver's sign convention; validated by :func:`flow_residual`.
    """

    def force(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        st, ct = np.sin(t), np.cos(t)
        sx, cx = np.sin(_PI * x), np.cos(_PI * x)
        sy, cy = np.sin(_PI * y), np.cos(_PI * y)
        lap1 = _PI ** 2 * sy * cy * (2 * np.cos(2 * _PI * x) - 4 * sx ** 2)
        lap2 = -_PI ** 2 * sx * cx * (2 * np.cos(2 * _PI * y) - 4 * sy ** 2)
        px = 0.5 * _PI * np.cos(2 * _PI * x) * np.sin(2 * _PI * y)
        py = 0.5 * _PI * np.sin(2 * _PI * x) * np.cos(2 * _PI * y)
        fx = ct * sx ** 2 * sy * cy - nu * st * lap1 + st * px
        fy = -ct * sx * cx * sy ** 2 - nu * st * lap2 + st * py
        return fx, fy

    return force


# -- manufactured transport: rotating cone with flipping orientation --------

_CONE_STEEPNESS = 50.0
_CONE_SCALE = -1.0 / 3.0


def cone_center(t):
    """Center of the cone, circling the domain midpoint counterclockwise."""
    return 0.5 + 0.25 * np.cos(2 * _PI * t), 0.5 + 0.25 * np.sin(2 * _PI * t)


def _cone_amplitude(t):
    th = np.mod(np.asarray(t, dtype=float), 1.0)
    n1 = np.where(th < 0.5, -1.0, 1.0)
    n2 = np.where(th < 0.5, 5 * _PI * (4 * th - 1.0), 5 * _PI * (4 * (th - 0.5) - 1.0))
    return n1 * _CONE_SCALE * np.arctan(n2)


def _cone_amplitude_rate(t):
    th = np.mod(np.asarray(t, dtype=float), 1.0)
    n1 = np.where(th < 0.5, -1.0, 1.0)
    n2 = np.where(th < 0.5, 5 * _PI * (4 * th - 1.0), 5 * _PI * (4 * (th - 0.5) - 1.0))
    return n1 * _CONE_SCALE * 20 * _PI / (1.0 + n2 ** 2)


def cone_value(x, y, t):
    """Concentration: rational bump around the moving center, signed in time."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m1, m2 = cone_center(t)
    bump = 1.0 / (1.0 + _CONE_STEEPNESS * ((x - m1) ** 2 + (y - m2) ** 2))
    return _cone_amplitude(t) * bump


def cone_forcing(epsilon: float, alpha: float) -> Callable:
    """Right-hand side reproducing the cone under the swirl convection.

    Closed form of dt u - eps lap u + v.grad u + alpha u with v the swirl
    velocity; validated by :func:`transport_residual`.
    """

    a = _CONE_STEEPNESS

    def force(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        m1, m2 = cone_center(t)
        dx, dy = x - m1, y - m2
        r2 = dx ** 2 + dy ** 2
        den = 1.0 + a * r2
        u1 = 1.0 / den
        du1x = -2.0 * a * dx / den ** 2
        du1y = -2.0 * a * dy / den ** 2
        lap_u1 = -4.0 * a / den ** 2 + 8.0 * a ** 2 * r2 / den ** 3
        m1p = -0.5 * _PI * np.sin(2 * _PI * t)
        m2p = 0.5 * _PI * np.cos(2 * _PI * t)
        dtu1 = (2.0 * a / den ** 2) * (dx * m1p + dy * m2p)
        u2 = _cone_amplitude(t)
        u2p = _cone_amplitude_rate(t)
        vx, vy = swirl_velocity(x, y, t)
        return (u2 * dtu1 + u1 * u2p - epsilon * u2 * lap_u1
                + u2 * (vx * du1x + vy * du1y) + alpha * u1 * u2)

    return force


# -- geometries -------------------------------------------------------------

def _outline_segments(color: str, rect: Rectangle) -> list[BoundarySegment]:
    return [
        BoundarySegment(color, rect.x0, rect.y0, rect.x1, rect.y0),
        BoundarySegment(color, rect.x1, rect.y0, rect.x1, rect.y1),
        BoundarySegment(color, rect.x0, rect.y1, rect.x1, rect.y1),
        BoundarySegment(color, rect.x0, rect.y0, rect.x0, rect.y1),
    ]


def unit_square_geometry() -> GeometrySpec:
    rect = Rectangle(0.0, 0.0, 1.0, 1.0)
    return GeometrySpec((rect,), tuple(_outline_segments("wall", rect)))


def channel_geometry() -> GeometrySpec:
    """Two unit squares joined by a constriction of a fifth of their height."""
    left = Rectangle(-1.0, -0.5, 0.0, 0.5)
    throat = Rectangle(0.0, -0.1, 1.0, 0.1)
    right = Rectangle(1.0, -0.5, 2.0, 0.5)
    walls = [
        BoundarySegment("wall", -1.0, -0.5, 0.0, -0.5),
        BoundarySegment("wall", -1.0, 0.5, 0.0, 0.5),
        BoundarySegment("wall", 1.0, -0.5, 2.0, -0.5),
        BoundarySegment("wall", 1.0, 0.5, 2.0, 0.5),
        BoundarySegment("wall", 0.0, -0.1, 1.0, -0.1),
        BoundarySegment("wall", 0.0, 0.1, 1.0, 0.1),
        BoundarySegment("wall", 0.0, -0.5, 0.0, -0.1),
        BoundarySegment("wall", 0.0, 0.1, 0.0, 0.5),
        BoundarySegment("wall", 1.0, -0.5, 1.0, -0.1),
        BoundarySegment("wall", 1.0, 0.1, 1.0, 0.5),
        BoundarySegment("inflow", -1.0, -0.5, -1.0, 0.5),
        BoundarySegment("outflow", 2.0, -0.5, 2.0, 0.5),
    ]
    return GeometrySpec((left, throat, right), tuple(walls))


# -- benchmark scenarios ----------------------------------------------------

def rotating_cone_problem(epsilon: float = 1.0, alpha: float = 1.0,
                          nu: float = 0.5, delta0: float = 0.0,
                          mesh_size_transport: float = 0.5,
                          mesh_size_flow: float = 0.25) -> ProblemDefinition:
    """Coupled manufactured benchmark on the unit square, final time 1.

    Transport and flow both carry Dirichlet data from the closed forms on
    the whole boundary (color "wall"); the flow pressure is fixed by the
    pin-and-shift strategy since no natural boundary exists.
    """

    geo = unit_square_geometry()
    transport = TransportCoefficients(
        epsilon=epsilon, alpha=alpha,
        forcing=cone_forcing(epsilon, alpha),
        dirichlet={"wall": cone_value},
        initial=lambda x, y: cone_value(x, y, 0.0),
        delta0=delta0)
    flow = FlowCoefficients(
        nu=nu, forcing=swirl_forcing(nu),
        dirichlet={"wall": swirl_velocity},
        initial=lambda x, y: swirl_velocity(x, y, 0.0),
        pressure_mode="pin-and-shift")
    return ProblemDefinition(
        name="rotating-cone", geometry_transport=geo, geometry_flow=geo,
        transport=transport, flow=flow, final_time=1.0,
        mesh_size_transport=mesh_size_transport, mesh_size_flow=mesh_size_flow,
        length_scale=1.0, velocity_scale=1.0,
        exact_u=cone_value, exact_v=swirl_velocity, exact_p=swirl_pressure)


def channel_inflow(variant: str) -> Callable:
    """Inflow velocity profile of the constricted channel.

    The steady variant drives a fixed parabola of unit peak. The ramped
    variant scales the parabola by arctan(t)/(pi/2) until t = 0.1 and then
    switches to a literal unit plug profile.
    """

    def steady(x, y, t):
        y = np.asarray(y, dtype=float)
        prof = 1.0 - 4.0 * y ** 2
        return prof, np.zeros_like(prof)

    def ramped(x, y, t):
        y = np.asarray(y, dtype=float)
        if t <= 0.1:
            scale = math.atan(t) / (_PI / 2.0)
            prof = scale * (1.0 - 4.0 * y ** 2)
        else:
            prof = np.ones_like(y)
        return prof, np.zeros_like(prof)

    if variant == "steady-inflow":
        return steady
    if variant == "arctan-inflow":
        return ramped
    raise ValueError(f"unknown channel variant {variant!r}")


def channel_problem(variant: str = "steady-inflow",
                    delta0: float = 0.0) -> ProblemDefinition:
    """Species transport through a constricted channel, final time 2.5.

    A concentration pulse (value 1) enters on the inflow boundary over the
    band |y| < 0.4 during an initial window (t <= 0.2 for the steady inflow,
    t <= 0.1 for the ramped one) and is carried through the constriction; the
    outflow and walls are natural boundaries for the transport. The flow has
    no-slip walls, the variant's inflow profile, and a natural outflow, so
    the pressure level needs no pinning.
    """

    geo = channel_geometry()
    window = 0.2 if variant == "steady-inflow" else 0.1
    inflow_v = channel_inflow(variant)

    def pulse(x, y, t):
        y = np.asarray(y, dtype=float)
        inside = (np.abs(y) < 0.4) & (t <= window)
        return np.where(inside, 1.0, 0.0)

    def zero_pair(x, y, t):
        z = np.zeros_like(np.asarray(y, dtype=float))
        return z, z

    transport = TransportCoefficients(
        epsilon=1e-4, alpha=0.1, forcing=None,
        dirichlet={"inflow": pulse},
        initial=lambda x, y: np.zeros_like(np.asarray(x, dtype=float)),
        delta0=delta0)
    flow = FlowCoefficients(
        nu=1.0, forcing=None,
        dirichlet={"inflow": inflow_v, "wall": zero_pair},
        initial=lambda x, y: zero_pair(x, y, 0.0),
        pressure_mode="none")
    return ProblemDefinition(
        name=f"channel-{variant}", geometry_transport=geo, geometry_flow=geo,
        transport=transport, flow=flow, final_time=2.5,
        mesh_size_transport=0.05, mesh_size_flow=0.05,
        length_scale=1.0, velocity_scale=1.0)


# -- space-time norms and convergence orders --------------------------------

def _time_rule(order: int, time_rule: str):
    if time_rule == "gauss":
        return gauss_rule(order + 2)
    if time_rule == "nodal":
        return gauss_rule(order + 1)
    raise ValueError(f"unknown time rule {time_rule!r}")


def _scalar_l2l2(sol: SlabwiseSolution, exact: Callable, time_rule: str) -> float:
    total = 0.0
    for idx, slab in enumerate(sol.slabs):
        handler = sol.handlers[idx]
        p = handler.degree
        batch = quad_batch(handler.mesh, p, p + 2)
        rows = batch.cell_dof_rows(handler)
        tb = TimeBasis(slab.time_degree)
        rule = _time_rule(slab.time_degree, time_rule)
        theta = tb.eval(rule.points)
        coeffs = sol.coeffs[idx]
        for k in range(slab.n_cells):
            t0, t1 = slab.cell(k)
            tau = t1 - t0
            tids = k * (slab.time_degree + 1) + np.arange(slab.time_degree + 1)
            cell_co = coeffs[tids]
            for q in range(len(rule.points)):
                t = t0 + rule.points[q] * tau
                co = theta[q] @ cell_co
                uh = np.einsum("qi,ci->cq", batch.phi, co[rows])
                ue = exact(batch.points[:, :, 0], batch.points[:, :, 1], t)
                total += tau * rule.weights[q] * batch.integrate((uh - ue) ** 2)
    return math.sqrt(total)


def _flow_l2l2(sol: FlowSolution, exact: Callable, time_rule: str,
               part: str) -> float:
    total = 0.0
    for idx, slab in enumerate(sol.slabs):
        vh, ph = sol.handlers[idx]
        handler = vh if part == "velocity" else ph
        batch = quad_batch(handler.mesh, handler.degree, handler.degree + 2)
        rows = batch.cell_dof_rows(handler)
        tb = TimeBasis(slab.time_degree)
        rule = _time_rule(slab.time_degree, time_rule)
        theta = tb.eval(rule.points)
        nv = vh.n_dofs
        for k in range(slab.n_cells):
            t0, t1 = slab.cell(k)
            tau = t1 - t0
            tids = k * (slab.time_degree + 1) + np.arange(slab.time_degree + 1)
            cell_co = sol.coeffs[idx][tids]
            for q in range(len(rule.points)):
                t = t0 + rule.points[q] * tau
                co = theta[q] @ cell_co
                px = batch.points[:, :, 0]
                py = batch.points[:, :, 1]
                if part == "velocity":
                    uhx = np.einsum("qi,ci->cq", batch.phi, co[:nv][rows])
                    uhy = np.einsum("qi,ci->cq", batch.phi, co[nv:2 * nv][rows])
                    ex, ey = exact(px, py, t)
                    err = (uhx - ex) ** 2 + (uhy - ey) ** 2
                else:
                    uh = np.einsum("qi,ci->cq", batch.phi, co[2 * nv:][rows])
                    err = (uh - exact(px, py, t)) ** 2
                total += tau * rule.weights[q] * batch.integrate(err)
    return math.sqrt(total)


def l2l2_error(solution, exact: Callable, time_rule: str = "gauss",
               part: str = "velocity") -> float:
    """Global L2(L2) distance between a slabwise solution and a closed form.

    ``time_rule`` selects the temporal quadrature: "gauss" integrates each
    temporal cell with a rule two orders above the ansatz, "nodal" samples
    at the ansatz's own nodes (the convention of the reported benchmark
    errors and of the adaptive driver's refinement comparisons). For flow
    solutions ``part`` picks the velocity pair or the pressure.
    """

    if isinstance(solution, FlowSolution):
        if part not in ("velocity", "pressure"):
            raise ValueError(f"unknown flow part {part!r}")
        return _flow_l2l2(solution, exact, time_rule, part)
    return _scalar_l2l2(solution, exact, time_rule)


def eoc(errors) -> list[float]:
    """Experimental convergence orders of a factor-2 refinement sequence."""
    vals = [float(e) for e in errors]
    if len(vals) < 2:
        raise ValueError("need at least two errors")
    if any(e <= 0.0 for e in vals):
        raise ValueError("convergence orders require positive errors")
    return [math.log2(vals[i - 1] / vals[i]) for i in range(1, len(vals))]


# -- goal functionals -------------------------------------------------------

def _mean_value(sol: SlabwiseSolution) -> tuple[float, float, float]:
    """Space-time integral of the solution plus the measures |I| and |Omega|."""
    total = 0.0
    for idx, slab in enumerate(sol.slabs):
        handler = sol.handlers[idx]
        p = handler.degree
        batch = quad_batch(handler.mesh, p, p + 2)
        rows = batch.cell_dof_rows(handler)
        tb = TimeBasis(slab.time_degree)
        rule = gauss_rule(slab.time_degree + 1)
        theta = tb.eval(rule.points)
        coeffs = sol.coeffs[idx]
        for k in range(slab.n_cells):
            t0, t1 = slab.cell(k)
            tau = t1 - t0
            tids = k * (slab.time_degree + 1) + np.arange(slab.time_degree + 1)
            cell_co = coeffs[tids]
            for q in range(len(rule.points)):
                co = theta[q] @ cell_co
                uh = np.einsum("qi,ci->cq", batch.phi, co[rows])
                total += tau * rule.weights[q] * batch.integrate(uh)
    span = sol.endpoints[-1] - sol.slabs[0].t_start
    area = sol.slabs[0].mesh.total_area()
    return total, span, area


def goal_value(solution: SlabwiseSolution, goal) -> float:
    """Evaluate the goal functional at a discrete transport solution.

    For the space-time mean this is the mean of the discrete field. For the
    error-controlling goal it is the weighted pairing of the field with the
    normalized pointwise error of the final solution, so the goal error
    J(u) - J(u_k) reduces to the global L2(L2) error itself.
    """

    if goal.kind == "space-time-mean":
        total, span, area = _mean_value(solution)
        return total / (span * area)
    if goal.kind == "l2l2-error":
        if goal.exact is None:
            raise ValueError("error goal needs the analytic solution")
        err = l2l2_error(solution, goal.exact, time_rule=goal.time_rule)
        exact_pair = _pair_with_error(solution, goal)
        return exact_pair - err ** 2 / max(goal.normalization, 1e-300)
    raise ValueError(f"unknown goal kind {goal.kind!r}")


def _pair_with_error(sol: SlabwiseSolution, goal) -> float:
    """Integral of exact * (exact - u_k) / normalization over space-time."""
    total = 0.0
    for idx, slab in enumerate(sol.slabs):
        handler = sol.handlers[idx]
        p = handler.degree
        batch = quad_batch(handler.mesh, p, p + 2)
        rows = batch.cell_dof_rows(handler)
        tb = TimeBasis(slab.time_degree)
        rule = _time_rule(slab.time_degree, goal.time_rule)
        theta = tb.eval(rule.points)
        coeffs = sol.coeffs[idx]
        for k in range(slab.n_cells):
            t0, t1 = slab.cell(k)
            tau = t1 - t0
            tids = k * (slab.time_degree + 1) + np.arange(slab.time_degree + 1)
            cell_co = coeffs[tids]
            for q in range(len(rule.points)):
                t = t0 + rule.points[q] * tau
                co = theta[q] @ cell_co
                uh = np.einsum("qi,ci->cq", batch.phi, co[rows])
                ue = goal.exact(batch.points[:, :, 0], batch.points[:, :, 1], t)
                total += tau * rule.weights[q] * batch.integrate(ue * (ue - uh))
    return total / max(goal.normalization, 1e-300)


def goal_error(solution: SlabwiseSolution, goal) -> float:
    """Exact goal error J(u) - J(u_k); needs the analytic solution."""
    if goal.exact is None:
        raise ValueError("goal error needs the analytic solution")
    if goal.kind == "l2l2-error":
        return l2l2_error(solution, goal.exact, time_rule=goal.time_rule)
    if goal.kind == "space-time-mean":
        total, span, area = _mean_value(solution)
        exact_total = _exact_mean(solution, goal.exact)
        return (exact_total - total) / (span * area)
    raise ValueError(f"unknown goal kind {goal.kind!r}")


def _exact_mean(sol: SlabwiseSolution, exact: Callable) -> float:
    total = 0.0
    for idx, slab in enumerate(sol.slabs):
        handler = sol.handlers[idx]
        batch = quad_batch(handler.mesh, handler.degree, handler.degree + 3)
        rule = gauss_rule(slab.time_degree + 3)
        for k in range(slab.n_cells):
            t0, t1 = slab.cell(k)
            tau = t1 - t0
            for q in range(len(rule.points)):
                t = t0 + rule.points[q] * tau
                ue = exact(batch.points[:, :, 0], batch.points[:, :, 1], t)
                total += tau * rule.weights[q] * batch.integrate(ue)
    return total


# -- characteristic time scales ---------------------------------------------

def characteristic_times(coeffs: TransportCoefficients, length: float,
                         velocity: float) -> tuple[float, float]:
    """Transport and flow time scales of the nondimensional formulation.

    The transport scale is the fastest of diffusion, convection, and
    reaction; the flow scale is the convective one. Their mismatch is what
    the multirate decomposition exploits.
    """

    if coeffs.epsilon <= 0 or coeffs.alpha <= 0 or velocity <= 0 or length <= 0:
        raise ValueError("characteristic times need positive coefficients")
    t_transport = min(length ** 2 / coeffs.epsilon,
                      length / velocity,
                      1.0 / coeffs.alpha)
    t_flow = length / velocity
    return t_transport, t_flow


# -- finite-difference validation of the closed forms -----------------------

def _sample_points(geometry: GeometrySpec, n: int, rng, margin: float):
    rects = geometry.rectangles
    areas = np.array([(r.x1 - r.x0) * (r.y1 - r.y0) for r in rects])
    choice = rng.choice(len(rects), size=n, p=areas / areas.sum())
    x = np.empty(n)
    y = np.empty(n)
    for i, c in enumerate(choice):
        r = rects[c]
        x[i] = rng.uniform(r.x0 + margin, r.x1 - margin)
        y[i] = rng.uniform(r.y0 + margin, r.y1 - margin)
    return x, y


def _d1(f, h):
    """Fourth-order first derivative from the five-point samples f(-2h..2h)."""
    return (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * h)


def _d2(f, h):
    """Fourth-order second derivative from the five-point samples."""
    return (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * h ** 2)


def _stencil(g, x, y, t, axis, h):
    shifts = np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) * h
    if axis == "x":
        return [np.asarray(g(x + s, y, t)) for s in shifts]
    if axis == "y":
        return [np.asarray(g(x, y + s, t)) for s in shifts]
    return [np.asarray(g(x, y, t + s)) for s in shifts]


def divergence_residual(velocity: Callable, geometry: GeometrySpec,
                        n_points: int = 100, t: float = 0.7,
                        h: float = 1e-4, order: int = 4,
                        seed: int = 20817) -> float:
    """Max |div v| at random interior points via finite differences."""
    rng = np.random.default_rng(seed)
    x, y = _sample_points(geometry, n_points, rng, margin=4 * h)
    if order == 2:
        dvx = (np.asarray(velocity(x + h, y, t)[0])
               - np.asarray(velocity(x - h, y, t)[0])) / (2 * h)
        dvy = (np.asarray(velocity(x, y + h, t)[1])
               - np.asarray(velocity(x, y - h, t)[1])) / (2 * h)
    else:
        fx = _stencil(lambda a, b, c: velocity(a, b, c)[0], x, y, t, "x", h)
        fy = _stencil(lambda a, b, c: velocity(a, b, c)[1], x, y, t, "y", h)
        dvx = _d1(fx, h)
        dvy = _d1(fy, h)
    return float(np.max(np.abs(dvx + dvy)))


def transport_residual(problem: ProblemDefinition, n_points: int = 200,
                       h_space: float = 5e-4, h_time: float = 1e-4,
                       seed: int = 4711) -> float:
    """Max PDE residual of the manufactured transport data by differencing.

    Samples avoid the temporal kinks of the closed form (half-integer times)
    and stay a stencil width inside the domain.
    """

    if problem.exact_u is None or problem.exact_v is None:
        raise ValueError("residual check needs closed forms")
    rng = np.random.default_rng(seed)
    u = problem.exact_u
    co = problem.transport
    x, y = _sample_points(problem.geometry_transport, n_points, rng,
                          margin=4 * h_space)
    tt = np.empty(n_points)
    for i in range(n_points):
        while True:
            c = rng.uniform(4 * h_time, problem.final_time - 4 * h_time)
            if abs(c * 2.0 - round(c * 2.0)) > 0.02:
                break
        tt[i] = c
    worst = 0.0
    for i in range(n_points):
        xi, yi, ti = x[i], y[i], tt[i]
        fx = _stencil(u, xi, yi, ti, "x", h_space)
        fy = _stencil(u, xi, yi, ti, "y", h_space)
        ft = _stencil(u, xi, yi, ti, "t", h_time)
        lap = _d2(fx, h_space) + _d2(fy, h_space)
        vx, vy = problem.exact_v(xi, yi, ti)
        res = (_d1(ft, h_time) - co.epsilon * lap
               + vx * _d1(fx, h_space) + vy * _d1(fy, h_space)
               + co.alpha * u(xi, yi, ti) - co.forcing(xi, yi, ti))
        worst = max(worst, abs(float(res)))
    return worst


def flow_residual(problem: ProblemDefinition, n_points: int = 200,
                  h: float = 1e-3, seed: int = 911) -> float:
    """Max momentum-balance residual of the manufactured flow by differencing."""
    if problem.exact_v is None or problem.exact_p is None:
        raise ValueError("residual check needs closed forms")
    rng = np.random.default_rng(seed)
    v = problem.exact_v
    p = problem.exact_p
    nu = problem.flow.nu
    x, y = _sample_points(problem.geometry_flow, n_points, rng, margin=4 * h)
    tt = rng.uniform(4 * h, problem.final_time - 4 * h, size=n_points)
    worst = 0.0
    for i in range(n_points):
        xi, yi, ti = x[i], y[i], tt[i]
        for comp in (0, 1):
            g = lambda a, b, c: v(a, b, c)[comp]
            fx = _stencil(g, xi, yi, ti, "x", h)
            fy = _stencil(g, xi, yi, ti, "y", h)
            ft = _stencil(g, xi, yi, ti, "t", h)
            fp = _stencil(p, xi, yi, ti, "x" if comp == 0 else "y", h)
            res = (_d1(ft, h) - nu * (_d2(fx, h) + _d2(fy, h)) + _d1(fp, h)
                   - problem.flow.forcing(xi, yi, ti)[comp])
            worst = max(worst, abs(float(res)))
    return worst
