"""Magnetic geodesic flow on the unit tangent bundle of a conformal disk.

Phase points are ``(x, y, theta)`` with velocity ``e^{-phi}(cos theta, sin theta)``.
The flow is integrated with fixed-step RK4, vectorised over batches of rays;
the boundary crossing of the last step is located by bisection on the step
length.  Extra state (transport matrices, Jacobi fields, ...) can ride along
the same steps through :class:`Extra`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import (
    BoundaryPoint,
    ExitPoint,
    MagneticSystem,
    NotSimpleError,
    boundary_fan,
    check_magnetic_convexity,
    exit_point_from_state,
)

EXIT_TOL = 1e-13


class TrappedGeodesicError(NotSimpleError):
    """A geodesic did not leave the disk within ``max_flow_time``."""


@dataclass(frozen=True)
class PhasePoint:
    x: float
    y: float
    theta: float


@dataclass
class Extra:
    """State integrated alongside the flow.

    ``rhs(coeffs, value)`` returns the time derivative of ``value`` (shape
    ``(rays, ...)``) given the per-ray :class:`FlowCoefficients`.
    ``on_node(k, idx, coeffs, value)`` is called at every accepted node; the
    refined exit node is reported with ``k = -1``.
    """

    value: np.ndarray
    rhs: Callable
    on_node: Optional[Callable] = None


class FlowCoefficients:
    """Geometric quantities at a batch of phase points, computed once per stage."""

    __slots__ = ("x", "y", "th", "c", "s", "em", "phi_x", "phi_y", "lam")

    def __init__(self, system: MagneticSystem, px, py, th):
        vals = system.flow_coefficients(px, py)
        self.x, self.y, self.th = px, py, th
        self.c, self.s = np.cos(th), np.sin(th)
        self.em = vals[..., 0]
        self.phi_x, self.phi_y, self.lam = vals[..., 1], vals[..., 2], vals[..., 3]

    def velocity(self):
        return self.em * self.c, self.em * self.s

    def theta_rate(self):
        return self.em * (-self.phi_x * self.s + self.phi_y * self.c) + self.lam


def _geo_rhs(co: FlowCoefficients):
    vx, vy = co.velocity()
    return vx, vy, co.theta_rate()


def _bcast(h, value):
    return h.reshape(h.shape + (1,) * (value.ndim - 1))


def _rk4(system, px, py, th, h, extra=None, extra_val=None):
    """One RK4 step of length ``h`` (per ray) for the flow plus optional extra state."""
    def stage(ax, ay, at, ev):
        co = FlowCoefficients(system, ax, ay, at)
        d = _geo_rhs(co)
        de = extra.rhs(co, ev) if extra is not None else None
        return d, de

    (k1x, k1y, k1t), e1 = stage(px, py, th, extra_val)
    hh = 0.5 * h
    (k2x, k2y, k2t), e2 = stage(px + hh * k1x, py + hh * k1y, th + hh * k1t,
                                None if extra is None else extra_val + _bcast(hh, extra_val) * e1)
    (k3x, k3y, k3t), e3 = stage(px + hh * k2x, py + hh * k2y, th + hh * k2t,
                                None if extra is None else extra_val + _bcast(hh, extra_val) * e2)
    (k4x, k4y, k4t), e4 = stage(px + h * k3x, py + h * k3y, th + h * k3t,
                                None if extra is None else extra_val + _bcast(h, extra_val) * e3)
    w = h / 6.0
    nx = px + w * (k1x + 2 * k2x + 2 * k3x + k4x)
    ny = py + w * (k1y + 2 * k2y + 2 * k3y + k4y)
    nt = th + w * (k1t + 2 * k2t + 2 * k3t + k4t)
    ne = None
    if extra is not None:
        ne = extra_val + _bcast(w, extra_val) * (e1 + 2 * e2 + 2 * e3 + e4)
    return nx, ny, nt, ne


@dataclass
class MarchResult:
    """Outcome of a batched flow integration.

    ``n_steps[i]`` uniform steps of size ``dt`` followed by one refined step of
    length ``h_last[i]``; ``exit_time = n_steps * dt + h_last``.
    """

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    exit_time: np.ndarray
    n_steps: np.ndarray
    h_last: np.ndarray
    dt: float
    extra: Optional[np.ndarray] = None
    history: Optional[dict] = None


def march(system: MagneticSystem, x0, y0, th0, dt: float, extra: Optional[Extra] = None,
          record: bool = False) -> MarchResult:
    """Integrate a batch of rays until each leaves the closed disk."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    px = np.array(x0, dtype=float, ndmin=1)
    py = np.array(y0, dtype=float, ndmin=1)
    th = np.array(th0, dtype=float, ndmin=1)
    n = px.size
    ev = None if extra is None else np.array(extra.value, copy=True)
    n_steps = np.zeros(n, dtype=int)
    active = np.arange(n)
    hist = {"x": [px.copy()], "y": [py.copy()], "theta": [th.copy()],
            "extra": [] if ev is None else [ev.copy()], "alive": [np.ones(n, bool)]} if record else None
    if extra is not None and extra.on_node is not None:
        extra.on_node(0, active, FlowCoefficients(system, px, py, th), ev)

    max_steps = int(math.ceil(system.max_flow_time / dt))
    k = 0
    while active.size:
        if k >= max_steps:
            raise TrappedGeodesicError(
                f"{active.size} geodesic(s) still inside the disk after "
                f"max_flow_time={system.max_flow_time}")
        k += 1
        h = np.full(active.size, dt)
        sub_ev = None if ev is None else ev[active]
        nx, ny, nt, ne = _rk4(system, px[active], py[active], th[active], h, extra, sub_ev)
        inside = nx * nx + ny * ny <= 1.0
        acc = active[inside]
        px[acc], py[acc], th[acc] = nx[inside], ny[inside], nt[inside]
        if ev is not None:
            ev[acc] = ne[inside]
        n_steps[acc] += 1
        if extra is not None and extra.on_node is not None and acc.size:
            extra.on_node(k, acc, FlowCoefficients(system, px[acc], py[acc], th[acc]), ev[acc])
        if record:
            alive = np.zeros(n, bool)
            alive[acc] = True
            hist["x"].append(px.copy())
            hist["y"].append(py.copy())
            hist["theta"].append(th.copy())
            if ev is not None:
                hist["extra"].append(ev.copy())
            hist["alive"].append(alive)
        active = acc

    # bisection on the length of the crossing step, geometry only
    lo = np.zeros(n)
    hi = np.full(n, dt)
    for _ in range(80):
        if float((hi - lo).max()) <= EXIT_TOL:
            break
        mid = 0.5 * (lo + hi)
        mx, my, _, _ = _rk4(system, px, py, th, mid)
        ok = mx * mx + my * my <= 1.0
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    h_last = 0.5 * (lo + hi)
    ex, ey, et, ee = _rk4(system, px, py, th, h_last, extra, ev)
    if extra is not None and extra.on_node is not None:
        extra.on_node(-1, np.arange(n), FlowCoefficients(system, ex, ey, et), ee)
    return MarchResult(x=ex, y=ey, theta=et, exit_time=n_steps * dt + h_last,
                       n_steps=n_steps, h_last=h_last, dt=dt, extra=ee, history=hist)


def replay(system: MagneticSystem, x0, y0, th0, steps: np.ndarray, extra: Extra):
    """Integrate along a prescribed per-ray step schedule (``steps`` is (k, rays)).

    Zero entries leave a ray untouched; negative entries integrate backwards.
    """
    px = np.array(x0, dtype=float, ndmin=1)
    py = np.array(y0, dtype=float, ndmin=1)
    th = np.array(th0, dtype=float, ndmin=1)
    ev = np.array(extra.value, copy=True)
    for k, h in enumerate(np.atleast_2d(steps)):
        px, py, th, ev = _rk4(system, px, py, th, h, extra, ev)
        if extra.on_node is not None:
            extra.on_node(k + 1, np.arange(px.size), FlowCoefficients(system, px, py, th), ev)
    return px, py, th, ev


@dataclass
class GeodesicTrace:
    """A sampled magnetic geodesic: uniform nodes plus the refined exit node."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    exit_time: float
    exited: bool
    dt: float

    @property
    def samples(self):
        return [(float(t), PhasePoint(float(a), float(b), float(c)))
                for t, a, b, c in zip(self.t, self.x, self.y, self.theta)]

    @property
    def start(self) -> PhasePoint:
        return PhasePoint(float(self.x[0]), float(self.y[0]), float(self.theta[0]))

    @property
    def end(self) -> PhasePoint:
        return PhasePoint(float(self.x[-1]), float(self.y[-1]), float(self.theta[-1]))

    @property
    def step_schedule(self) -> np.ndarray:
        return np.diff(self.t)

    def at(self, t):
        """Linear interpolation of ``(x, y, theta)`` at time(s) ``t``."""
        return (np.interp(t, self.t, self.x), np.interp(t, self.t, self.y),
                np.interp(t, self.t, self.theta))

    def g_speed(self, system: MagneticSystem) -> np.ndarray:
        """g-norm of the velocity recovered from the sampled positions.

        Uses 4th-order differences on the uniform nodes; the first two, the
        last three and the exit node are nan.
        """
        phi = system.surface.conformal_factor(self.x, self.y)
        vx = _uniform_derivative(self.t, self.x)
        vy = _uniform_derivative(self.t, self.y)
        return np.exp(phi) * np.hypot(vx, vy)


def _traces_from_march(res: MarchResult, x0, y0, th0) -> list[GeodesicTrace]:
    traces = []
    for i in range(res.x.size):
        n = int(res.n_steps[i])
        t = np.append(np.arange(n + 1) * res.dt, res.exit_time[i])
        xs = np.append([h[i] for h in res.history["x"][: n + 1]], res.x[i])
        ys = np.append([h[i] for h in res.history["y"][: n + 1]], res.y[i])
        ts = np.append([h[i] for h in res.history["theta"][: n + 1]], res.theta[i])
        traces.append(GeodesicTrace(t, xs, ys, ts, float(res.exit_time[i]), True, res.dt))
    return traces


def integrate_geodesics(system: MagneticSystem, starts, dt: float = 1e-3) -> list[GeodesicTrace]:
    starts = list(starts)
    x0 = np.array([p.x for p in starts])
    y0 = np.array([p.y for p in starts])
    th0 = np.array([p.theta for p in starts])
    for px, py in zip(x0, y0):
        if px * px + py * py > 1.0 + 1e-12:
            raise ValueError(f"start ({px}, {py}) is outside the closed disk")
    res = march(system, x0, y0, th0, dt, record=True)
    return _traces_from_march(res, x0, y0, th0)


def integrate_geodesic(system: MagneticSystem, start: PhasePoint, dt: float = 1e-3) -> GeodesicTrace:
    """Integrate the magnetic geodesic from ``start`` until it leaves the disk.

    Raises :class:`TrappedGeodesicError` if it is still inside after
    ``system.max_flow_time``.
    """
    return integrate_geodesics(system, [start], dt)[0]


def exit_time(system: MagneticSystem, start: PhasePoint, dt: float = 1e-3) -> float:
    res = march(system, [start.x], [start.y], [start.theta], dt)
    return float(res.exit_time[0])


def entry_state(entry: BoundaryPoint) -> PhasePoint:
    bx, by = entry.position()
    return PhasePoint(bx, by, entry.direction_angle())


def scattering_relation(system: MagneticSystem, entry: BoundaryPoint, dt: float = 1e-3) -> ExitPoint:
    """Exit point and direction of the geodesic entering at ``entry``."""
    if not entry.incoming:
        raise ValueError("entry direction must point into the disk (|mu| <= pi/2)")
    start = entry_state(entry)
    res = march(system, [start.x], [start.y], [start.theta], dt)
    return exit_point_from_state(float(res.x[0]), float(res.y[0]), float(res.theta[0]))


def scatter_fan(system: MagneticSystem, entries, dt: float = 1e-3):
    """Batched scattering relation: list of ``(entry, exit_point, tau)``."""
    entries = list(entries)
    starts = [entry_state(e) for e in entries]
    res = march(system, [s.x for s in starts], [s.y for s in starts],
                [s.theta for s in starts], dt)
    return [(e, exit_point_from_state(float(res.x[i]), float(res.y[i]), float(res.theta[i])),
             float(res.exit_time[i])) for i, e in enumerate(entries)]


# --- Jacobi fields and the magnetic Riccati equation ------------------------

def jacobi_coefficient(system: MagneticSystem, co: FlowCoefficients):
    """``K - <grad lam, i gamma'> + lam^2`` along the flow."""
    jac = system.jacobi_coefficients(co.x, co.y)
    K, lx, ly = jac[..., 0], jac[..., 1], jac[..., 2]
    rotated = co.em * (-lx * co.s + ly * co.c)
    return K - rotated + co.lam**2


@dataclass
class JacobiSolution:
    t: np.ndarray
    y: np.ndarray
    ydot: np.ndarray
    x_comp: np.ndarray
    coefficient: np.ndarray
    z: Optional[np.ndarray] = None
    c: Optional[float] = None

    def residual(self) -> float:
        """Sup of ``ydd + q y`` with ``ydd`` from 4th-order differences of ``ydot``."""
        return float(np.abs(_uniform_derivative(self.t, self.ydot) + self.coefficient * self.y)[2:-3].max())


def _uniform_derivative(t, f):
    """4th-order central differences on the uniform prefix of a trace (nan elsewhere)."""
    h = t[1] - t[0]
    out = np.full(f.shape, np.nan)
    n_uniform = len(t) - 1  # drop the refined exit node
    g = f[:n_uniform]
    out[2:n_uniform - 2] = (g[:-4] - 8 * g[1:-3] + 8 * g[3:-1] - g[4:]) / (12 * h)
    return out


def _solve_jacobi_batch(system, traces, initial):
    """Integrate several Jacobi fields (``initial`` rows are ``(y0, ydot0, x0)``) along each trace.

    All traces advance together; shorter step schedules are padded with zero
    steps, which leave a ray untouched. Returns ``(states, q)`` per trace.
    """
    columns, rays = len(initial), len(traces)
    depth = max(len(tr.t) for tr in traces) - 1
    steps = np.zeros((depth, rays))
    for i, tr in enumerate(traces):
        steps[: len(tr.t) - 1, i] = tr.step_schedule
    x0 = np.array([tr.x[0] for tr in traces])
    y0 = np.array([tr.y[0] for tr in traces])
    th0 = np.array([tr.theta[0] for tr in traces])
    value = np.tile(np.concatenate([np.asarray(r, float) for r in initial]), (rays, 1))
    states = [value.copy()]
    qs = [jacobi_coefficient(system, FlowCoefficients(system, x0, y0, th0))]

    def rhs(co, v):
        q = jacobi_coefficient(system, co)
        d = np.empty_like(v)
        for j in range(columns):
            d[:, 3 * j] = v[:, 3 * j + 1]
            d[:, 3 * j + 1] = -q * v[:, 3 * j]
            d[:, 3 * j + 2] = co.lam * v[:, 3 * j]
        return d

    def on_node(k, idx, co, v):
        states.append(v.copy())
        qs.append(jacobi_coefficient(system, co))

    replay(system, x0, y0, th0, steps, Extra(value=value, rhs=rhs, on_node=on_node))
    S, Q = np.stack(states), np.stack(qs)
    return [(S[: len(tr.t), i], Q[: len(tr.t), i]) for i, tr in enumerate(traces)]


def _solve_jacobi_columns(system, trace: GeodesicTrace, initial):
    return _solve_jacobi_batch(system, [trace], initial)[0]


def solve_jacobi(system: MagneticSystem, trace: GeodesicTrace, y0: float, ydot0: float,
                 x0: float = 0.0) -> JacobiSolution:
    """Solve ``x' = lam y`` and ``y'' + (K - <grad lam, i gamma'> + lam^2) y = 0`` along ``trace``."""
    if not trace.exited:
        raise ValueError("trace must have exited")
    states, q = _solve_jacobi_columns(system, trace, [(y0, ydot0, x0)])
    return JacobiSolution(trace.t, states[:, 0], states[:, 1], states[:, 2], q)


@dataclass
class RiccatiSolution:
    t: np.ndarray
    u: np.ndarray
    z: np.ndarray
    c: float
    residual: float


C_SWEEP = tuple(2.0**k for k in range(21))


def solve_riccati(system: MagneticSystem, trace: GeodesicTrace) -> RiccatiSolution:
    """Riccati solution ``u = z'/z`` with ``z = c y + w`` nonvanishing along ``trace``.

    ``y`` vanishes initially with unit derivative, ``w`` starts at 1 with zero
    derivative; ``c`` is the first of 1, 2, 4, ..., 2^20 that keeps ``z > 0``.
    The reported residual is ``u' + u^2 + q`` with ``u'`` from finite
    differences of the samples, so it checks the ODE solution independently.
    """
    states, q = _solve_jacobi_columns(system, trace, RICCATI_INITIAL)
    return _riccati_from_states(trace, states, q)


RICCATI_INITIAL = [(0.0, 1.0, 0.0), (1.0, 0.0, 0.0)]


def _riccati_from_states(trace, states, q) -> RiccatiSolution:
    yv, yd, wv, wd = states[:, 0], states[:, 1], states[:, 3], states[:, 4]
    for c in C_SWEEP:
        z = c * yv + wv
        if np.all(z > 0):
            break
    else:
        raise NotSimpleError("no c in the sweep keeps z nonvanishing: conjugate points")
    zd = c * yd + wd
    u = zd / z
    res = _uniform_derivative(trace.t, u) + u**2 + q
    return RiccatiSolution(trace.t, u, z, c, float(np.nanmax(np.abs(res))))


def solve_riccati_fan(system: MagneticSystem, entries, dt: float = 1e-3) -> list[RiccatiSolution]:
    """:func:`solve_riccati` along every geodesic of a fan, integrated as one batch."""
    traces = integrate_geodesics(system, [entry_state(e) for e in entries], dt)
    return [_riccati_from_states(tr, st, q)
            for tr, (st, q) in zip(traces, _solve_jacobi_batch(system, traces, RICCATI_INITIAL))]


@dataclass
class ConjugatePointReport:
    min_value: float
    passed: bool
    n_fan: int

    def to_dict(self):
        return {"min_value": self.min_value, "pass": self.passed, "n_fan": self.n_fan}


def check_no_conjugate_points(system: MagneticSystem, n_fan: int = 32, dt: float = 1e-3,
                              ramp: float = 1e-3) -> ConjugatePointReport:
    """Check that the Jacobi field with ``y(0)=0, y'(0)=1`` stays positive on a fan."""
    if n_fan < 16:
        raise ValueError("n_fan must be >= 16")
    entries = boundary_fan(n_fan)
    starts = [entry_state(e) for e in entries]
    lowest = math.inf

    def rhs(co, v):
        q = jacobi_coefficient(system, co)
        return np.stack([v[:, 1], -q * v[:, 0], v[:, 2] * 0], axis=1)

    def on_node(k, idx, co, v):
        nonlocal lowest
        if k == 0:
            return
        if k > 0 and k * dt < ramp:
            return
        lowest = min(lowest, float(v[:, 0].min()))

    value = np.tile([0.0, 1.0, 0.0], (len(starts), 1))
    march(system, [s.x for s in starts], [s.y for s in starts], [s.theta for s in starts],
          dt, Extra(value=value, rhs=rhs, on_node=on_node))
    return ConjugatePointReport(lowest, bool(lowest > 0), n_fan)


def validate_simple(system: MagneticSystem, n_samples: int = 64, n_fan: int = 32,
                    dt: float = 1e-3) -> None:
    """Gate used before transforms: convexity first, then the conjugate-point fan."""
    conv = check_magnetic_convexity(system, n_samples)
    if not conv.passed:
        raise NotSimpleError(
            f"boundary is not strictly magnetic convex (min margin {conv.min_margin:.3g})")
    conj = check_no_conjugate_points(system, n_fan, dt)
    if not conj.passed:
        raise NotSimpleError(f"conjugate points detected (min Jacobi value {conj.min_value:.3g})")
