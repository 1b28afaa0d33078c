"""Matrix transport along magnetic geodesics and attenuated ray transforms.

Along the geodesic entering at ``(x, v)`` the fundamental solution ``U_-``
obeys ``d/dt U_- = -calA U_-`` with ``U_-(0) = Id``, where
``calA(x, v) = A(x, v) + Phi(x)``.  The transforms integrate
``U_-^{-1} f`` over ``[0, tau]``; we carry ``W = U_-^{-1}`` directly, which
solves ``d/dt W = W calA``.

Quadrature nodes are the integrator nodes: composite Simpson on the uniform
part (with a 3/8 panel when the count is odd) and a cubic Lagrange closure
over the refined last step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fields import AttenuationPair
from .flow import Extra, FlowCoefficients, GeodesicTrace, _uniform_derivative, entry_state, march, replay
from .geometry import BoundaryPoint, MagneticSystem, boundary_fan

FORWARD = "forward"
BACKWARD = "backward"


def sm_attenuation(pair: AttenuationPair, co: FlowCoefficients) -> np.ndarray:
    """``A(x, v) + Phi(x)`` at a batch of phase points, shape ``(rays, n, n)``."""
    m = pair.evaluator(co.x, co.y)
    vx, vy = co.velocity()
    return vx[:, None, None] * m[:, 0] + vy[:, None, None] * m[:, 1] + m[:, 2]


# --- quadrature ---------------------------------------------------------------

def _lagrange_integral_weights(nodes, a, b):
    """Weights of the interpolatory rule through ``nodes`` for the integral over [a, b]."""
    nodes = np.asarray(nodes, float)
    w = np.empty(nodes.size)
    for j, tj in enumerate(nodes):
        others = np.delete(nodes, j)
        poly = np.polynomial.Polynomial.fromroots(others)
        anti = poly.integ()
        w[j] = (anti(b) - anti(a)) / np.prod(tj - others)
    return w


def trace_weights(n_steps: int, dt: float, h_last: float) -> np.ndarray:
    """Quadrature weights for nodes ``0, dt, ..., n_steps*dt, n_steps*dt + h_last``."""
    N = int(n_steps)
    w = np.zeros(N + 2)
    tN = N * dt
    if N < 3:
        nodes = np.append(np.arange(N + 1) * dt, tN + h_last)
        keep = np.ones(nodes.size, bool)
        if N >= 1 and h_last < 0.1 * dt:
            keep[N] = False  # nearly coincident with the exit node
        w[keep] = _lagrange_integral_weights(nodes[keep], 0.0, tN + h_last)
        return w
    if N % 2 == 0:
        w[0:N + 1:2] += 2 * dt / 3
        w[1:N:2] += 4 * dt / 3
        w[0] -= dt / 3
        w[N] -= dt / 3
    else:
        m = N - 3
        if m:
            w[0:m + 1:2] += 2 * dt / 3
            w[1:m:2] += 4 * dt / 3
            w[0] -= dt / 3
            w[m] -= dt / 3
        w[m:m + 4] += 3 * dt / 8 * np.array([1.0, 3.0, 3.0, 1.0])
    nodes = np.array([-2 * dt, -dt, 0.0, h_last])
    w[[N - 2, N - 1, N, N + 1]] += _lagrange_integral_weights(nodes, 0.0, h_last)
    return w


def integrate_samples(t: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Integrate samples on a trace time grid (uniform nodes plus refined exit node)."""
    dt = t[1] - t[0] if t.size > 2 else t[-1] - t[0]
    n_steps = t.size - 2
    w = trace_weights(n_steps, dt, t[-1] - n_steps * dt)
    return np.tensordot(w, values, axes=(0, 0))


# --- fan transport -------------------------------------------------------------

@dataclass
class FanTransport:
    """Nodes, ``U_-^{-1}`` and quadrature weights for a fan of geodesics.

    Arrays are padded to a common node count; padded nodes carry weight 0.
    Any number of integrands can be pushed through :meth:`integrate`
    without re-integrating the flow.
    """

    entries: list
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    tau: np.ndarray
    n: int
    W: Optional[np.ndarray] = None  # (rays, nodes, n, n)
    exit_W: Optional[np.ndarray] = None

    def evaluate(self, f) -> np.ndarray:
        vals = np.asarray(f(self.x, self.y, self.theta), dtype=complex)
        if vals.ndim == self.x.ndim:
            vals = vals[..., None]
        return vals

    def integrate(self, f) -> np.ndarray:
        """``I f`` for every fan member, shape ``(rays, n)``."""
        vals = self.evaluate(f)
        if self.W is not None:
            vals = np.einsum("rmij,rmj->rmi", self.W, vals)
        return np.einsum("rm,rmi->ri", self.weights, vals)


def transport_fan(system: MagneticSystem, pair: Optional[AttenuationPair], entries,
                  dt: float = 1e-3) -> FanTransport:
    entries = list(entries)
    starts = [entry_state(e) for e in entries]
    return transport_from(system, pair, [s.x for s in starts], [s.y for s in starts],
                          [s.theta for s in starts], dt, entries)


def transport_from(system: MagneticSystem, pair: Optional[AttenuationPair], x0, y0, th0,
                   dt: float = 1e-3, entries=None) -> FanTransport:
    """Like :func:`transport_fan` for arbitrary starting phase points."""
    x0, y0, th0 = (np.asarray(v, float).ravel() for v in (x0, y0, th0))
    rays = x0.size
    n = 1 if pair is None else pair.n
    records = []

    if pair is None:
        value = np.zeros((rays, 1))

        def rhs(co, v):
            return np.zeros_like(v)
    else:
        value = np.tile(np.eye(n, dtype=complex), (rays, 1, 1))

        def rhs(co, v):
            return v @ sm_attenuation(pair, co)

    def on_node(k, idx, co, v):
        records.append((k, idx.copy(), co.x.copy(), co.y.copy(), co.th.copy(),
                        None if pair is None else v.copy()))

    res = march(system, x0, y0, th0, dt, Extra(value=value, rhs=rhs, on_node=on_node))
    M = int(res.n_steps.max()) + 2
    px = np.repeat(res.x[:, None], M, axis=1)
    py = np.repeat(res.y[:, None], M, axis=1)
    pt = np.repeat(res.theta[:, None], M, axis=1)
    W = None if pair is None else np.zeros((rays, M, n, n), dtype=complex)
    for k, idx, a, b, c, v in records:
        col = res.n_steps[idx] + 1 if k < 0 else np.full(idx.size, k)
        px[idx, col], py[idx, col], pt[idx, col] = a, b, c
        if W is not None:
            W[idx, col] = v
    weights = np.zeros((rays, M))
    for r in range(rays):
        N = int(res.n_steps[r])
        weights[r, :N + 2] = trace_weights(N, dt, float(res.h_last[r]))
    return FanTransport(entries if entries is not None else [], px, py, pt, weights, res.exit_time.copy(), n, W,
                        None if pair is None else res.extra.copy())


def attenuated_transform_fan(system, pair, f, entries, dt: float = 1e-3) -> np.ndarray:
    for e in entries:
        if not e.incoming:
            raise ValueError("entries must point into the disk")
    return transport_fan(system, pair, entries, dt).integrate(f)


def attenuated_transform(system: MagneticSystem, pair: AttenuationPair, f,
                         entry: BoundaryPoint, dt: float = 1e-3) -> np.ndarray:
    """``I_{A,Phi} f`` at one incoming boundary point, a vector in ``C^n``."""
    return attenuated_transform_fan(system, pair, f, [entry], dt)[0]


def unattenuated_transform(system: MagneticSystem, f, entry: BoundaryPoint,
                           dt: float = 1e-3) -> complex:
    vals = attenuated_transform_fan(system, None, f, [entry], dt)[0]
    return complex(vals[0])


# --- transport matrices on a single trace ---------------------------------------

@dataclass
class TransportSolution:
    """``U`` sampled on the nodes of ``trace`` (same ordering as ``trace.t``)."""

    trace: GeodesicTrace
    U: np.ndarray
    direction: str
    generator: np.ndarray = field(repr=False, default=None)

    def unitarity_defect(self) -> float:
        eye = np.eye(self.U.shape[-1])
        return float(np.abs(np.conj(np.swapaxes(self.U, -1, -2)) @ self.U - eye).max())

    def ode_residual(self) -> float:
        """Sup of ``dU/dt + calA U`` with ``dU/dt`` from 4th-order differences."""
        flat = self.U.reshape(self.U.shape[0], -1)
        d = np.stack([_uniform_derivative(self.trace.t, flat[:, j].real)
                      + 1j * _uniform_derivative(self.trace.t, flat[:, j].imag)
                      for j in range(flat.shape[1])], axis=1).reshape(self.U.shape)
        res = d + self.generator @ self.U
        return float(np.nanmax(np.abs(res)))

    def inverse(self) -> np.ndarray:
        if self.unitarity_defect() < 1e-8:
            return np.conj(np.swapaxes(self.U, -1, -2))
        return np.linalg.inv(self.U)


def transport_matrix(system: MagneticSystem, pair: AttenuationPair, trace: GeodesicTrace,
                     direction: str = FORWARD) -> TransportSolution:
    """Solve ``(X + lam V) U + calA U = 0`` along ``trace``.

    ``forward`` gives ``U_-`` with ``U = Id`` at the entry point; ``backward``
    gives ``U_+`` with ``U = Id`` at the exit point, integrated backwards on
    the recorded step schedule.
    """
    if not trace.exited:
        raise ValueError("trace must have exited")
    n = pair.n
    states = []
    gens = []

    def rhs(co, v):
        return -sm_attenuation(pair, co) @ v

    def on_node(k, idx, co, v):
        states.append(v[0].copy())
        gens.append(sm_attenuation(pair, co)[0])

    steps = trace.step_schedule
    if direction == FORWARD:
        p0 = trace.start
        sched = steps
    elif direction == BACKWARD:
        p0 = trace.end
        sched = -steps[::-1]
    else:
        raise ValueError(f"direction must be {FORWARD!r} or {BACKWARD!r}")
    eye = np.eye(n, dtype=complex)[None]
    co0 = FlowCoefficients(system, np.array([p0.x]), np.array([p0.y]), np.array([p0.theta]))
    on_node(0, None, co0, eye)
    replay(system, p0.x, p0.y, p0.theta, sched[:, None], Extra(value=eye, rhs=rhs, on_node=on_node))
    U = np.array(states)
    G = np.array(gens)
    if direction == BACKWARD:
        U, G = U[::-1], G[::-1]
    return TransportSolution(trace, U, direction, G)


# --- scattering data -------------------------------------------------------------

@dataclass
class ScatteringData:
    entries: list
    C: np.ndarray  # (rays, n, n)
    tau: np.ndarray

    def unitarity_defect(self) -> float:
        eye = np.eye(self.C.shape[-1])
        return float(np.abs(np.conj(np.swapaxes(self.C, -1, -2)) @ self.C - eye).max())

    def sup_difference(self, other: "ScatteringData") -> float:
        return float(np.abs(self.C - other.C).max())


@dataclass
class BackwardStages:
    """RK4 stage points of the backward replay over a fan, shape ``(depth, 4, rays)``.

    They depend only on the system and the fan, so several pairs can share them.
    """

    entries: list
    tau: np.ndarray
    steps: np.ndarray  # (depth, rays), negative
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray


def backward_stages(system: MagneticSystem, entries, dt: float = 1e-3) -> BackwardStages:
    entries = list(entries)
    starts = [entry_state(e) for e in entries]
    rays = len(starts)
    res = march(system, [s.x for s in starts], [s.y for s in starts],
                [s.theta for s in starts], dt)
    depth = int(res.n_steps.max()) + 1
    steps = np.zeros((depth, rays))
    steps[0] = -res.h_last
    for r in range(rays):
        steps[1:res.n_steps[r] + 1, r] = -dt
    seen = []

    def record(co, v):
        vx, vy = co.velocity()
        seen.append((co.x, co.y, vx, vy))
        return np.zeros_like(v)

    replay(system, res.x, res.y, res.theta, steps, Extra(value=np.zeros((rays, 1)), rhs=record))
    x, y, vx, vy = (np.array([row[i] for row in seen]).reshape(depth, 4, rays) for i in range(4))
    return BackwardStages(entries, res.exit_time.copy(), steps, x, y, vx, vy)


def scattering_data_for(system: MagneticSystem, pair: AttenuationPair, entries,
                        dt: float = 1e-3, stages: Optional[BackwardStages] = None) -> ScatteringData:
    """``C_+ = U_+`` at the entry points, ``U_+`` integrated back from the exit.

    The attenuation is evaluated on every stage point in one batch; pass
    ``stages`` from :func:`backward_stages` to reuse the geometry across pairs.
    """
    st = stages if stages is not None else backward_stages(system, entries, dt)
    depth, _, rays = st.x.shape
    n = pair.n
    v = np.tile(np.eye(n, dtype=complex), (rays, 1, 1))
    chunk = max(1, 4096 // max(rays, 1))
    for k0 in range(0, depth, chunk):
        sl = slice(k0, min(depth, k0 + chunk))
        m = pair.evaluator(st.x[sl], st.y[sl])
        neg = -(st.vx[sl][..., None, None] * m[..., 0, :, :] + st.vy[sl][..., None, None] * m[..., 1, :, :]
                + m[..., 2, :, :])
        for j, h in enumerate(st.steps[sl]):
            hh, w = (0.5 * h)[:, None, None], (h / 6.0)[:, None, None]
            M = neg[j]
            e1 = M[0] @ v
            e2 = M[1] @ (v + hh * e1)
            e3 = M[2] @ (v + hh * e2)
            e4 = M[3] @ (v + 2 * hh * e3)
            v = v + w * (e1 + 2 * e2 + 2 * e3 + e4)
    return ScatteringData(st.entries, v, st.tau.copy())


def scattering_data(system: MagneticSystem, pair: AttenuationPair, fan_size: int,
                    dt: float = 1e-3) -> ScatteringData:
    if fan_size < 1:
        raise ValueError("fan_size must be >= 1")
    return scattering_data_for(system, pair, boundary_fan(fan_size), dt)


def constant_scalar_oracle(c: float, tau):
    """``(e^{i c tau} - 1)/(i c)``, the transform of 1 with ``Phi = i c``."""
    tau = np.asarray(tau, float)
    if c == 0:
        return tau.astype(complex)
    return (np.exp(1j * c * tau) - 1) / (1j * c)


def matrix_exponential_path(M: np.ndarray, t) -> np.ndarray:
    """``exp(M t)`` for a normal matrix via eigendecomposition, batched over ``t``."""
    w, P = np.linalg.eig(M)
    Pi = np.linalg.inv(P)
    t = np.atleast_1d(np.asarray(t, float))
    return np.einsum("ij,tj,jk->tik", P, np.exp(np.outer(t, w)), Pi)


__all__ = [
    "FORWARD", "BACKWARD", "FanTransport", "ScatteringData", "TransportSolution",
    "BackwardStages", "attenuated_transform", "attenuated_transform_fan", "backward_stages", "constant_scalar_oracle",
    "integrate_samples", "matrix_exponential_path", "scattering_data", "scattering_data_for",
    "sm_attenuation", "trace_weights", "transport_fan", "transport_from", "transport_matrix",
    "unattenuated_transform",
]

