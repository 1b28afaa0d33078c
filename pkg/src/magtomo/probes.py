"""Empirical checks of the injectivity and gauge statements, built on the transform and fiber modules.

Each probe returns a :class:`ProbeReport`.  Random fields come from a
``numpy`` generator seeded per probe, so reports are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import sympy as sp

from .expr import random_polynomial, theta, x, y
from .fields import (
    AttenuationPair,
    SMFunction,
    apply_flow_symbolic,
    gauge_transform,
    make_kernel_element,
    random_gauge,
    random_pair,
    random_rim_vanishing,
    random_tensor,
    rim_factor,
    tensor_to_sm_function,
)
from .fiber import wavenumbers
from .geometry import MagneticSystem, boundary_fan
from .transform import backward_stages, scattering_data_for, transport_fan, transport_from

KERNEL_TOL = 1e-6
GAUGE_TOL = 1e-6
CONTROL_MIN = 1e-3
DEGREE_TOL = 1e-4
SVD_RATIO_MIN = 1e-3
COLLAPSE_TOL = 1e-8


class ConfigError(ValueError):
    """A probe was configured in a way that cannot produce a meaningful result."""


@dataclass
class ProbeReport:
    name: str
    metrics: list = field(default_factory=list)
    passed: bool = False
    config_hash: str = ""
    seed: Optional[int] = None
    note: str = ""

    def metric(self, label):
        for key, value in self.metrics:
            if key == label:
                return value
        raise KeyError(label)

    def to_dict(self):
        out = {"name": self.name, "metrics": [[k, v] for k, v in self.metrics],
               "pass": self.passed, "config_hash": self.config_hash, "seed": self.seed}
        if self.note:
            out["note"] = self.note
        return out


def _fan(fan_size):
    return boundary_fan(fan_size)


# --- kernel forward ---------------------------------------------------------------

def probe_kernel_forward(system: MagneticSystem, pair: Optional[AttenuationPair] = None,
                         n_draws: int = 10, fan_size: int = 64, *, n: int = 1,
                         dt: float = 1e-3, seed: int = 0, zero_p: bool = False) -> ProbeReport:
    """Max over draws and fan of ``|I_{A,Phi}(Phi p + d_A p)|``.

    With ``pair=None`` every draw also randomises the pair (rank ``n``).
    """
    rng = np.random.default_rng(seed)
    entries = _fan(fan_size)
    worst = 0.0
    shared = None if pair is None else transport_fan(system, pair, entries, dt)
    for _ in range(n_draws):
        pr = pair if pair is not None else random_pair(rng, n)
        p = sp.zeros(pr.n, 1) if zero_p else random_rim_vanishing(rng, pr.n)
        f = make_kernel_element(p, pr).sm_function(system.surface)
        ft = shared if shared is not None else transport_fan(system, pr, entries, dt)
        worst = max(worst, float(np.abs(ft.integrate(f)).max()))
    return ProbeReport("kernel", [("max_abs_transform", worst), ("n_draws", n_draws),
                                  ("fan_size", fan_size)], worst < KERNEL_TOL, seed=seed)


# --- gauge determination ---------------------------------------------------------------

def higgs_control_pair(n: int = 1, strength: float = 2.0) -> AttenuationPair:
    """``Phi = i strength (1 - r^2) Id``, a pair whose doubling changes the fan."""
    return AttenuationPair.higgs(sp.I * strength * rim_factor() * sp.eye(n))


def probe_gauge_determination(system: MagneticSystem, pair: Optional[AttenuationPair] = None,
                              Q: Optional[sp.Matrix] = None, fan_size: int = 64, *,
                              n_draws: int = 1, n: int = 2, dt: float = 1e-3, seed: int = 0,
                              control: Optional[AttenuationPair] = None) -> ProbeReport:
    """Scattering fans of ``(A, Phi)`` and its gauge transform agree; ``Phi`` vs ``2 Phi`` do not."""
    rng = np.random.default_rng(seed)
    entries = _fan(fan_size)
    stages = backward_stages(system, entries, dt)  # shared by every pair below
    worst = 0.0
    for _ in range(n_draws):
        pr = pair if pair is not None else random_pair(rng, n)
        q = Q if Q is not None else random_gauge(rng, pr.n)
        a = scattering_data_for(system, pr, entries, dt, stages)
        b = scattering_data_for(system, gauge_transform(pr, q), entries, dt, stages)
        worst = max(worst, a.sup_difference(b))
    ctrl = control if control is not None else higgs_control_pair(1)
    doubled = AttenuationPair(ctrl.A_x, ctrl.A_y, 2 * ctrl.Phi)
    separation = scattering_data_for(system, ctrl, entries, dt, stages).sup_difference(
        scattering_data_for(system, doubled, entries, dt, stages))
    ok = worst < GAUGE_TOL and separation > CONTROL_MIN
    return ProbeReport("gauge", [("max_fan_difference", worst), ("control_separation", separation),
                                 ("n_draws", n_draws), ("fan_size", fan_size)], ok, seed=seed)


# --- tensor tomography -------------------------------------------------------------------

def random_boundary_vanishing_sm(rng, degree: int, power: int = 2, spatial_degree: int = 2) -> SMFunction:
    """Scalar ``(1 - r^2)^power sum_{|j| <= degree} q_j(x, y) e^{i j theta}``."""
    total = sp.Integer(0)
    for j in range(-degree, degree + 1):
        total += random_polynomial(rng, spatial_degree, complex_coeffs=True) * sp.exp(sp.I * j * theta)
    return SMFunction([rim_factor(power) * total])


def probe_tensor_tomography(system: MagneticSystem, k: int = 2, n_draws: int = 3,
                            fan_size: int = 64, *, dt: float = 1e-3, seed: int = 0) -> ProbeReport:
    """Potentials ``(X + lam V) u`` of degree <= k transform to zero; generic tensors do not."""
    if not 0 <= k <= 4:
        raise ConfigError("tensor order must satisfy 0 <= k <= 4")
    rng = np.random.default_rng(seed)
    ft = transport_fan(system, None, _fan(fan_size), dt)
    potential = 0.0
    if k >= 1:
        for _ in range(n_draws):
            u = random_boundary_vanishing_sm(rng, k - 1)
            f = apply_flow_symbolic(system, u)
            potential = max(potential, float(np.abs(ft.integrate(f)).max()))
    control = math.inf
    for _ in range(n_draws):
        tensor = random_tensor(rng, k)
        f = tensor_to_sm_function(tensor, system.surface)
        control = min(control, float(np.abs(ft.integrate(f)).max()))
    ok = potential < KERNEL_TOL and control > CONTROL_MIN
    return ProbeReport("tensor", [("max_potential_transform", potential),
                                  ("min_control_transform", control), ("order", k),
                                  ("n_draws", n_draws)], ok, seed=seed)


# --- degree reduction --------------------------------------------------------------------

def interior_phase_points(n_side: int = 12, ntheta: int = 16, radius: float = 0.9):
    """Spatial grid points with ``r <= radius`` times ``ntheta`` equispaced directions."""
    s = np.linspace(-radius, radius, n_side)
    X, Y = np.meshgrid(s, s, indexing="ij")
    keep = X * X + Y * Y <= radius * radius
    px, py = X[keep], Y[keep]
    th = 2 * np.pi * np.arange(ntheta) / ntheta
    return px, py, th


def recover_from_transport(system: MagneticSystem, f, px, py, th, dt: float = 1e-3):
    """``u(x, v) = -int_0^tau f(phi_t(x, v)) dt``, shape ``(points, ntheta)``."""
    P, T = px.size, th.size
    ft = transport_from(system, None, np.repeat(px, T), np.repeat(py, T), np.tile(th, P), dt)
    return -ft.integrate(f)[:, 0].reshape(P, T)


def probe_degree_reduction(system: MagneticSystem, u: Optional[SMFunction] = None, m: int = 3,
                           *, n_side: int = 12, ntheta: int = 16, dt: float = 1e-3,
                           seed: int = 0) -> ProbeReport:
    """Recover ``u`` from ``f = (X + lam V) u`` along the flow and check its fiber degree.

    ``u`` defaults to a random boundary-vanishing function of degree ``m - 1``.
    """
    if m < 1:
        raise ConfigError("degree reduction needs m >= 1 (a degree-0 f has no potential)")
    rng = np.random.default_rng(seed)
    if u is None:
        u = random_boundary_vanishing_sm(rng, m - 1)
    f = apply_flow_symbolic(system, u)
    px, py, th = interior_phase_points(n_side, ntheta)
    rec = recover_from_transport(system, f, px, py, th, dt)
    exact = u(px[:, None], py[:, None], th[None, :])[..., 0]
    coeffs = np.fft.fft(rec, axis=1) / ntheta
    k = wavenumbers(ntheta)
    mass = np.abs(coeffs) ** 2
    high = float(mass[:, np.abs(k) >= m].sum())
    total = float(mass.sum())
    frac = 0.0 if total == 0 else high / total
    err = float(np.abs(rec - exact).max())
    return ProbeReport("degree", [("high_mode_fraction", frac), ("recovery_error", err),
                                  ("m", m), ("points", int(px.size)), ("ntheta", ntheta)],
                       frac < DEGREE_TOL, seed=seed)


# --- null-space probe --------------------------------------------------------------------

def monomials(degree: int):
    return [x ** (d - a) * y**a for d in range(degree + 1) for a in range(d + 1)]


def _poly_coefficients(expr, basis_exps, degree):
    """Coefficients of ``expr`` on ``x^a y^b`` (a + b <= degree); errors if not representable."""
    expr = sp.expand(expr)
    if expr == 0:
        return np.zeros(len(basis_exps), complex)
    poly = sp.Poly(expr, x, y)
    if poly.total_degree() > degree:
        raise ConfigError(f"potential of degree {poly.total_degree()} exceeds the basis degree {degree}")
    out = np.zeros(len(basis_exps), complex)
    for (a, b), c in poly.terms():
        out[basis_exps.index((a, b))] = complex(c)
    return out


@dataclass
class NullspaceSetup:
    matrix: np.ndarray  # transform of every basis element, (rays * n, columns)
    potentials: np.ndarray  # coefficient vectors of potential pairs, (columns, count)
    labels: list


def nullspace_setup(system, pair: AttenuationPair, degree: int, fan_size: int, dt=1e-3):
    """Transform matrix on the basis ``(F, sigma_x, sigma_y)`` with polynomial entries of degree <= ``degree``."""
    n = pair.n
    mons = monomials(degree)
    exps = [(d - a, a) for d in range(degree + 1) for a in range(d + 1)]
    if 3 * len(mons) * n > 200:
        raise ConfigError("basis too large for a dense SVD (limit 200 columns)")
    ft = transport_fan(system, pair, _fan(fan_size), dt)
    c, s = sp.cos(theta), sp.sin(theta)
    em = sp.exp(-system.surface.phi)
    cols, labels = [], []
    for slot, factor in (("F", sp.Integer(1)), ("sigma_x", em * c), ("sigma_y", em * s)):
        for mono in mons:
            for comp in range(n):
                entries = [sp.Integer(0)] * n
                entries[comp] = mono * factor
                cols.append(ft.integrate(SMFunction(entries)).ravel())
                labels.append((slot, str(mono), comp))
    M = np.array(cols).T
    pots = []
    # every boundary-vanishing p = (1 - r^2) q whose potential fits the basis
    for q in monomials(max(degree - 1, -1)) if degree >= 1 else []:
        for comp in range(n):
            p = sp.zeros(n, 1)
            p[comp] = rim_factor() * q
            ke = make_kernel_element(p, pair)
            try:
                vec = []
                for part in (ke.F, ke.sigma_x, ke.sigma_y):
                    blocks = [_poly_coefficients(part[i], exps, degree) for i in range(n)]
                    vec.append(np.stack(blocks, axis=1).ravel())  # (monomial, component)
            except ConfigError:
                continue
            pots.append(np.concatenate(vec))
    P = np.array(pots).T if pots else np.zeros((M.shape[1], 0), complex)
    return NullspaceSetup(M, P, labels)


def probe_nullspace_svd(system: MagneticSystem, pair: Optional[AttenuationPair] = None,
                        degree: int = 3, fan_size: int = 128, *, dt: float = 1e-3,
                        seed: int = 0) -> ProbeReport:
    """Smallest singular value of the transform restricted to the complement of potentials.

    This is an empirical surrogate for injectivity modulo the natural
    obstruction, not a proof.
    """
    pair = AttenuationPair.zero(1) if pair is None else pair
    setup = nullspace_setup(system, pair, degree, fan_size, dt)
    M, P = setup.matrix, setup.potentials
    cols = M.shape[1]
    if M.shape[0] < cols + 1:
        raise ConfigError(f"fan of {fan_size} rays gives {M.shape[0]} rows for {cols} basis "
                          "columns; enlarge the fan")
    if P.shape[1]:
        Uq, sq, _ = np.linalg.svd(P, full_matrices=True)
        rank = int((sq > 1e-10 * sq.max()).sum())
        if rank < P.shape[1]:
            raise ConfigError("potential subspace is rank deficient in this basis")
        complement = Uq[:, rank:]
    else:
        rank = 0
        complement = np.eye(cols)
    restricted = M @ complement
    sv = np.linalg.svd(restricted, compute_uv=False)
    ratio = float(sv.min() / sv.max())
    metrics = [("sigma_min", float(sv.min())), ("sigma_max", float(sv.max())), ("ratio", ratio),
               ("columns", cols), ("potential_rank", rank), ("fan_size", fan_size)]
    collapse = None
    if P.shape[1]:
        direction = P[:, 0] / np.linalg.norm(P[:, 0])
        augmented = np.column_stack([restricted, M @ direction])
        sv2 = np.linalg.svd(augmented, compute_uv=False)
        collapse = float(sv2.min())
        metrics.append(("sigma_min_with_potential", collapse))
    ok = ratio > SVD_RATIO_MIN and (collapse is None or collapse < COLLAPSE_TOL)
    return ProbeReport("nullspace", metrics, ok, seed=seed, note="empirical surrogate")


def constant_basis_singular_value(system, fan_size=64, dt=1e-3):
    """Singular value of ``I`` on the constant function: ``||tau||`` over the fan."""
    ft = transport_fan(system, None, _fan(fan_size), dt)
    col = ft.integrate(lambda a, b, c: np.ones_like(a))[:, 0]
    return float(np.linalg.norm(col)), float(np.linalg.norm(ft.tau))


__all__ = [
    "ConfigError", "ProbeReport", "constant_basis_singular_value", "higgs_control_pair",
    "interior_phase_points", "nullspace_setup", "probe_degree_reduction",
    "probe_gauge_determination", "probe_kernel_forward", "probe_nullspace_svd",
    "probe_tensor_tomography", "random_boundary_vanishing_sm", "recover_from_transport",
]
