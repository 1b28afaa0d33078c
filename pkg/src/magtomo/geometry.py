"""Conformal disk surfaces, magnetic systems and boundary geometry.

A surface is the closed unit disk with metric ``e^{2 phi} (dx^2 + dy^2)``.
A magnetic system adds the intensity ``lam`` of the magnetic 2-form
``lam * dV_g``; the force ``Y`` rotates a velocity by +90 degrees in the
metric orientation and scales it by ``lam``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp

from .expr import Compiled, parse, x, y

_BOUNDARY_TOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the closed unit disk."""


class NotSimpleError(RuntimeError):
    """The magnetic system failed a simplicity gate."""


def _check_in_disk(px, py):
    if px * px + py * py > 1.0 + _BOUNDARY_TOL:
        raise DomainError(f"point ({px}, {py}) is outside the closed unit disk")


@dataclass(frozen=True, eq=False)
class Surface:
    """The closed unit disk with conformal metric ``e^{2 phi}|dz|^2``."""

    phi: sp.Expr
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "phi", parse(self.phi))

    @classmethod
    def flat(cls):
        return cls(sp.Integer(0), "flat disk")

    @classmethod
    def sphere_cap(cls, a=0.5):
        """Stereographic chart of a round cap (K = 1); ``a < 1`` keeps the rim convex."""
        a = sp.nsimplify(a)
        return cls(sp.log(2 * a / (1 + a**2 * (x**2 + y**2))), f"round cap a={a}")

    @classmethod
    def bump(cls, amplitude=0.1):
        amp = sp.nsimplify(amplitude)
        return cls(amp * sp.exp(-(x**2 + y**2)), f"gaussian bump amplitude={amp}")

    @cached_property
    def grad_expr(self):
        return sp.diff(self.phi, x), sp.diff(self.phi, y)

    @cached_property
    def hess_expr(self):
        px, py = self.grad_expr
        return sp.diff(px, x), sp.diff(px, y), sp.diff(py, y)

    @cached_property
    def curvature_expr(self):
        pxx, _, pyy = self.hess_expr
        return -sp.exp(-2 * self.phi) * (pxx + pyy)

    @cached_property
    def _eval(self):
        px, py = self.grad_expr
        pxx, pxy, pyy = self.hess_expr
        return Compiled([self.phi, px, py, pxx, pxy, pyy, self.curvature_expr])

    def conformal_factor(self, px, py):
        return self._eval(px, py)[..., 0]

    def grad_phi(self, px, py):
        v = self._eval(px, py)
        return v[..., 1], v[..., 2]

    def hess_phi(self, px, py):
        v = self._eval(px, py)
        return v[..., 3], v[..., 4], v[..., 5]

    def curvature(self, px, py):
        """Gaussian curvature, vectorised, without a domain check."""
        return self._eval(px, py)[..., 6]

    def metric_inner(self, px, py, a, b):
        """``g(a, b)`` for coordinate vectors ``a``, ``b`` at ``(px, py)``."""
        return math.exp(2 * float(self.conformal_factor(px, py))) * float(np.dot(a, b))


def curvature_at(surface: Surface, px: float, py: float) -> float:
    _check_in_disk(px, py)
    return float(surface.curvature(px, py))


@dataclass(frozen=True)
class BoundaryFrame:
    point: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    second_fundamental_form: float


def boundary_frame(surface: Surface, beta: float) -> BoundaryFrame:
    """Boundary point, unit tangent (counter-clockwise), inward unit normal and Pi.

    ``Pi`` is the g-geodesic curvature of the rim measured towards the inside,
    ``e^{-phi}(1 + d phi / dr)``.
    """
    c, s = math.cos(beta), math.sin(beta)
    phi = float(surface.conformal_factor(c, s))
    px, py = (float(v) for v in surface.grad_phi(c, s))
    em = math.exp(-phi)
    return BoundaryFrame(
        point=np.array([c, s]),
        tangent=em * np.array([-s, c]),
        normal=-em * np.array([c, s]),
        second_fundamental_form=em * (1.0 + c * px + s * py),
    )


@dataclass(frozen=True, eq=False)
class MagneticSystem:
    """A surface together with the magnetic intensity ``lam``."""

    surface: Surface
    lam: sp.Expr = sp.Integer(0)
    max_flow_time: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "lam", parse(self.lam))
        if not self.max_flow_time > 0:
            raise ValueError("max_flow_time must be positive")

    @cached_property
    def lam_grad_expr(self):
        return sp.diff(self.lam, x), sp.diff(self.lam, y)

    @cached_property
    def flow_coefficients(self) -> Compiled:
        """``(e^{-phi}, phi_x, phi_y, lam)``: everything the flow vector field needs."""
        px, py = self.surface.grad_expr
        return Compiled([sp.exp(-self.surface.phi), px, py, self.lam])

    @cached_property
    def jacobi_coefficients(self) -> Compiled:
        """``(K, lam_x, lam_y)`` for the magnetic Jacobi equation."""
        lx, ly = self.lam_grad_expr
        return Compiled([self.surface.curvature_expr, lx, ly])

    def lam_at(self, px, py):
        return self.flow_coefficients(px, py)[..., 3]

    def force(self, px, py, v):
        """``Y_x(v)``: ``lam`` times the +90 degree rotation of coordinate vector ``v``."""
        lam = float(self.lam_at(px, py))
        return lam * np.array([-v[1], v[0]])


@dataclass
class ConvexityReport:
    min_margin: float
    passed: bool
    n_samples: int
    worst_beta: float = field(default=float("nan"))

    def to_dict(self):
        return {"min_margin": self.min_margin, "pass": self.passed,
                "n_samples": self.n_samples, "worst_beta": self.worst_beta}


def check_magnetic_convexity(system: MagneticSystem, n_samples: int = 64) -> ConvexityReport:
    """Evaluate ``Pi(x,v) - <Y_x(v), nu(x)>`` over both unit tangents on the rim."""
    if n_samples < 8:
        raise ValueError("n_samples must be >= 8")
    surface = system.surface
    worst, worst_beta = math.inf, float("nan")
    for beta in np.linspace(0.0, 2 * math.pi, n_samples, endpoint=False):
        frame = boundary_frame(surface, beta)
        px, py = frame.point
        outward = -frame.normal
        for v in (frame.tangent, -frame.tangent):
            pushed = surface.metric_inner(px, py, system.force(px, py, v), outward)
            margin = frame.second_fundamental_form - pushed
            if margin < worst:
                worst, worst_beta = margin, float(beta)
    return ConvexityReport(float(worst), bool(worst > 0), n_samples, worst_beta)


@dataclass(frozen=True)
class BoundaryPoint:
    """Entry point on the rim: boundary angle ``beta`` and direction ``mu``.

    ``mu`` is measured from the inward normal, counter-clockwise; incoming
    directions have ``|mu| <= pi/2``.
    """

    beta: float
    mu: float

    @property
    def incoming(self) -> bool:
        return abs(self.mu) <= math.pi / 2

    def position(self):
        return math.cos(self.beta), math.sin(self.beta)

    def direction_angle(self) -> float:
        # the euclidean angle of the velocity; conformality keeps angles
        return self.beta + math.pi + self.mu


@dataclass(frozen=True)
class ExitPoint:
    """Exit point on the rim with ``mu`` measured from the outward normal."""

    beta: float
    mu: float
    theta: float


def exit_point_from_state(px, py, th) -> ExitPoint:
    beta = math.atan2(py, px)
    mu = (th - beta + math.pi) % (2 * math.pi) - math.pi
    return ExitPoint(beta=beta, mu=mu, theta=th)


def boundary_fan(fan_size: int, mu_margin: float = 0.05) -> list[BoundaryPoint]:
    """Deterministic fan of incoming boundary points.

    ``beta`` is uniform on the circle and ``mu`` uniform on
    ``[-(pi/2 - mu_margin), pi/2 - mu_margin]``; glancing directions are excluded.
    """
    if fan_size < 1:
        raise ValueError("fan_size must be >= 1")
    n_mu = max(1, int(math.isqrt(fan_size)))
    while n_mu > 1 and fan_size % n_mu:
        n_mu -= 1
    n_beta = fan_size // n_mu
    mu_max = math.pi / 2 - mu_margin
    mus = [0.0] if n_mu == 1 else list(np.linspace(-mu_max, mu_max, n_mu))
    betas = np.linspace(0.0, 2 * math.pi, n_beta, endpoint=False)
    return [BoundaryPoint(float(b), float(m)) for b in betas for m in mus]
