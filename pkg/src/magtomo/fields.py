"""Connections, Higgs fields, gauge transforms, kernel elements and tensors.

Everything is symbolic (sympy) and compiled to numpy on demand.  Functions
on the unit tangent bundle are :class:`SMFunction` objects: a ``C^n`` vector
of expressions in ``x``, ``y`` and the fiber angle ``theta``.

Hodge-star convention.  On 1-forms ``*sigma(v) = sigma(R v)`` where ``R`` is the
rotation by -90 degrees, equivalently ``*sigma = -V(sigma)`` as functions on
SM; with this choice ``X_perp f = *df`` and
``[V, X + A] = -X_perp - *A``.  On 2-forms ``*`` divides by the area form.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import comb

import numpy as np
import sympy as sp

from .expr import (
    Compiled,
    ExpressionError,
    MatrixFunction,
    as_matrix,
    conj_transpose,
    parse,
    random_disk_points,
    random_polynomial,
    skew_hermitian_defect,
    theta,
    x,
    y,
)
from .geometry import MagneticSystem, Surface

SKEW_TOL = 1e-12


class FieldValidationError(ValueError):
    pass


def _unit_velocity(surface: Surface):
    em = sp.exp(-surface.phi)
    return em * sp.cos(theta), em * sp.sin(theta)


def _rotated_velocity(surface: Surface):
    """Coordinates of the velocity rotated by -90 degrees."""
    em = sp.exp(-surface.phi)
    return em * sp.sin(theta), -em * sp.cos(theta)


class SMFunction:
    """A ``C^n``-valued function on the unit tangent bundle, given symbolically."""

    def __init__(self, components, label=""):
        if isinstance(components, (sp.Basic, str, int, float, complex)):
            components = [components]
        self.components = [parse(c, allow_theta=True) if not isinstance(c, sp.Basic) else c
                           for c in components]
        self.label = label

    @property
    def n(self):
        return len(self.components)

    @cached_property
    def _compiled(self):
        return Compiled(self.components, (x, y, theta))

    def __call__(self, px, py, th):
        """Evaluate at broadcastable arrays; result has a trailing axis of length n."""
        return self._compiled(px, py, th).astype(complex, copy=False)

    def __add__(self, other):
        return SMFunction([a + b for a, b in zip(self.components, other.components)])

    def __sub__(self, other):
        return SMFunction([a - b for a, b in zip(self.components, other.components)])

    def scale(self, factor):
        return SMFunction([factor * c for c in self.components])

    @classmethod
    def zero(cls, n=1):
        return cls([sp.Integer(0)] * n)


def apply_X_symbolic(surface: Surface, f: SMFunction) -> SMFunction:
    """Geodesic vector field ``X`` applied to ``f``."""
    px, py = surface.grad_expr
    em = sp.exp(-surface.phi)
    c, s = sp.cos(theta), sp.sin(theta)
    return SMFunction([
        em * (c * sp.diff(u, x) + s * sp.diff(u, y) + (-px * s + py * c) * sp.diff(u, theta))
        for u in f.components])


def apply_V_symbolic(f: SMFunction) -> SMFunction:
    return SMFunction([sp.diff(u, theta) for u in f.components])


def apply_flow_symbolic(system: MagneticSystem, f: SMFunction) -> SMFunction:
    """``(X + lam V) f``, the derivative of ``f`` along magnetic geodesics."""
    xf = apply_X_symbolic(system.surface, f)
    return SMFunction([a + system.lam * sp.diff(u, theta)
                       for a, u in zip(xf.components, f.components)])


# --- attenuation pairs -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AttenuationPair:
    """Unitary connection ``A = A_x dx + A_y dy`` and Higgs field ``Phi``."""

    A_x: sp.Matrix
    A_y: sp.Matrix
    Phi: sp.Matrix

    def __post_init__(self):
        for name in ("A_x", "A_y", "Phi"):
            object.__setattr__(self, name, as_matrix(getattr(self, name)))
        shapes = {self.A_x.shape, self.A_y.shape, self.Phi.shape}
        if len(shapes) != 1:
            raise FieldValidationError("A_x, A_y and Phi must have the same shape")

    @property
    def n(self) -> int:
        return self.A_x.shape[0]

    @classmethod
    def zero(cls, n=1):
        z = sp.zeros(n, n)
        return cls(z, z, z)

    @classmethod
    def higgs(cls, Phi):
        Phi = as_matrix(Phi)
        z = sp.zeros(*Phi.shape)
        return cls(z, z, Phi)

    @cached_property
    def evaluator(self) -> MatrixFunction:
        """Numpy evaluator returning ``(..., 3, n, n)`` for ``(A_x, A_y, Phi)``."""
        return MatrixFunction([self.A_x, self.A_y, self.Phi])

    def skew_defect(self, rng=None, count=64) -> float:
        rng = np.random.default_rng(0) if rng is None else rng
        return skew_hermitian_defect(self.evaluator, random_disk_points(rng, count))

    def validate(self, rng=None, tol=SKEW_TOL):
        defect = self.skew_defect(rng)
        if defect > tol:
            raise FieldValidationError(f"attenuation pair is not skew-Hermitian (defect {defect:.3g})")
        return defect

    def sm_attenuation(self, surface: Surface) -> sp.Matrix:
        """``A(x, v) + Phi(x)`` as a matrix of expressions in ``x, y, theta``."""
        v1, v2 = _unit_velocity(surface)
        return self.A_x * v1 + self.A_y * v2 + self.Phi

    def star_connection(self, surface: Surface) -> sp.Matrix:
        """``*A = -V(A)`` as a function on SM."""
        r1, r2 = _rotated_velocity(surface)
        return self.A_x * r1 + self.A_y * r2


@dataclass(frozen=True, eq=False)
class ConnectionCurvature:
    """``*F_A`` and the 1-form ``d_A Phi`` for a pair on a surface."""

    surface: Surface
    pair: AttenuationPair

    @cached_property
    def star_FA(self) -> sp.Matrix:
        A_x, A_y = self.pair.A_x, self.pair.A_y
        curl = A_y.diff(x) - A_x.diff(y) + A_x * A_y - A_y * A_x
        return sp.exp(-2 * self.surface.phi) * curl

    @cached_property
    def dA_Phi(self):
        """Coordinate components ``(dPhi + [A, Phi])_x`` and ``_y``."""
        Phi = self.pair.Phi
        comp_x = Phi.diff(x) + self.pair.A_x * Phi - Phi * self.pair.A_x
        comp_y = Phi.diff(y) + self.pair.A_y * Phi - Phi * self.pair.A_y
        return comp_x, comp_y

    def star_dA_Phi(self) -> sp.Matrix:
        """``*d_A Phi`` as a function on SM: ``d_A Phi`` applied to the -90 degree rotated velocity."""
        r1, r2 = _rotated_velocity(self.surface)
        cx, cy = self.dA_Phi
        return cx * r1 + cy * r2

    @cached_property
    def evaluator(self) -> MatrixFunction:
        """``(..., 3, n, n)``: ``*F_A``, ``(d_A Phi)_x``, ``(d_A Phi)_y``."""
        cx, cy = self.dA_Phi
        return MatrixFunction([self.star_FA, cx, cy])


# --- gauge transformations ---------------------------------------------------

def check_unitary(Q: sp.Matrix, rng=None, tol=1e-10, count=64) -> float:
    rng = np.random.default_rng(1) if rng is None else rng
    pts = random_disk_points(rng, count)
    q = MatrixFunction([Q])(pts[:, 0], pts[:, 1])[:, 0]
    eye = np.eye(Q.shape[0])
    defect = float(np.abs(np.conj(np.swapaxes(q, -1, -2)) @ q - eye).max())
    if defect > tol:
        raise FieldValidationError(f"gauge field is not unitary (defect {defect:.3g})")
    return defect


def boundary_identity_defect(Q: sp.Matrix, count=64) -> float:
    beta = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    q = MatrixFunction([Q])(np.cos(beta), np.sin(beta))[:, 0]
    return float(np.abs(q - np.eye(Q.shape[0])).max())


def gauge_transform(pair: AttenuationPair, Q: sp.Matrix, *, require_boundary_identity=True,
                    tol=1e-10) -> AttenuationPair:
    """``(Q^{-1} dQ + Q^{-1} A Q, Q^{-1} Phi Q)`` with ``Q^{-1} = Q^*``."""
    Q = as_matrix(Q)
    if Q.shape != pair.A_x.shape:
        raise FieldValidationError("gauge field has the wrong rank")
    check_unitary(Q, tol=tol)
    if require_boundary_identity:
        defect = boundary_identity_defect(Q)
        if defect > tol:
            raise FieldValidationError(f"gauge field is not the identity on the rim ({defect:.3g})")
    Qi = conj_transpose(Q)
    return AttenuationPair(
        A_x=Qi * Q.diff(x) + Qi * pair.A_x * Q,
        A_y=Qi * Q.diff(y) + Qi * pair.A_y * Q,
        Phi=Qi * pair.Phi * Q,
    )


def exp_gauge(profile: sp.Expr, generator) -> sp.Matrix:
    """``exp(profile * S)`` for a constant skew-Hermitian ``S``, built from its eigenbasis.

    With ``profile`` vanishing on the rim this is a unitary gauge field equal
    to the identity on the boundary.
    """
    S = np.asarray(generator, dtype=complex)
    H = -1j * S  # Hermitian
    w, U = np.linalg.eigh(H)
    n = S.shape[0]
    entries = [[sum(complex(U[i, k] * np.conj(U[j, k])) * sp.exp(sp.I * float(w[k]) * profile)
                    for k in range(n)) for j in range(n)] for i in range(n)]
    return sp.Matrix(entries)


# --- kernel elements -------------------------------------------------------------

@dataclass
class KernelElement:
    F: sp.Matrix
    sigma_x: sp.Matrix
    sigma_y: sp.Matrix

    def sm_function(self, surface: Surface) -> SMFunction:
        v1, v2 = _unit_velocity(surface)
        total = self.F + self.sigma_x * v1 + self.sigma_y * v2
        return SMFunction(list(total), label="kernel element")


def make_kernel_element(p, pair: AttenuationPair, tol=1e-10) -> KernelElement:
    """``F = Phi p``, ``sigma = dp + A p`` for ``p`` vanishing on the rim."""
    if isinstance(p, (list, tuple)):
        p = sp.Matrix([parse(c) for c in p])
    elif not isinstance(p, sp.MatrixBase):
        p = sp.Matrix([parse(p)])
    if p.shape != (pair.n, 1):
        raise FieldValidationError(f"p must have {pair.n} components")
    beta = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    vals = Compiled(list(p))(np.cos(beta), np.sin(beta))
    if np.abs(vals).max() > tol:
        raise FieldValidationError("p must vanish on the boundary")
    return KernelElement(F=pair.Phi * p, sigma_x=p.diff(x) + pair.A_x * p,
                         sigma_y=p.diff(y) + pair.A_y * p)


# --- symmetric tensors ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SymmetricTensor:
    """Symmetric covariant m-tensor; ``components[j]`` is the entry with j y-indices."""

    order: int
    components: tuple

    def __post_init__(self):
        comps = tuple(parse(c) for c in self.components)
        if len(comps) != self.order + 1:
            raise ExpressionError(f"an order-{self.order} symmetric tensor needs {self.order + 1} components")
        object.__setattr__(self, "components", comps)

    def entry(self, indices) -> sp.Expr:
        return self.components[sum(indices)]

    def to_sm_function(self, surface: Surface) -> SMFunction:
        return tensor_to_sm_function(self, surface)


def tensor_to_sm_function(tensor: SymmetricTensor, surface: Surface) -> SMFunction:
    v1, v2 = _unit_velocity(surface)
    m = tensor.order
    total = sum(comb(m, j) * tensor.components[j] * v1 ** (m - j) * v2 ** j for j in range(m + 1))
    return SMFunction([sp.Integer(0) + total], label=f"order-{m} tensor")


def _christoffel(surface: Surface):
    """``Gamma[k][i][j]`` for the conformal metric."""
    grad = surface.grad_expr
    delta = lambda a, b: 1 if a == b else 0  # noqa: E731
    return [[[delta(i, k) * grad[j] + delta(j, k) * grad[i] - delta(i, j) * grad[k]
              for j in range(2)] for i in range(2)] for k in range(2)]


def symmetric_inner_derivative(tensor: SymmetricTensor, surface: Surface) -> SymmetricTensor:
    """Symmetrised covariant derivative ``d^s h`` of an order-(m-1) tensor."""
    from itertools import permutations

    h = tensor
    m = h.order + 1
    gamma = _christoffel(surface)
    coords = (x, y)

    def nabla(idx):
        i0, rest = idx[0], idx[1:]
        val = sp.diff(h.entry(rest), coords[i0]) if rest else sp.diff(h.components[0], coords[i0])
        for k in range(len(rest)):
            for l_ in range(2):
                swapped = rest[:k] + (l_,) + rest[k + 1:]
                val -= gamma[l_][i0][rest[k]] * h.entry(swapped)
        return val

    comps = []
    for j in range(m + 1):
        base = (0,) * (m - j) + (1,) * j
        perms = list(permutations(base))
        comps.append(sp.simplify(sum(nabla(p) for p in perms) / len(perms)))
    return SymmetricTensor(m, tuple(comps))


# --- random draws ----------------------------------------------------------------------

def rim_factor(power=1) -> sp.Expr:
    return (1 - x**2 - y**2) ** power


def random_skew_field(rng, n, degree=1, scale=1.0) -> sp.Matrix:
    """Skew-Hermitian matrix field with polynomial entries."""
    M = sp.zeros(n, n)
    for i in range(n):
        M[i, i] = sp.I * random_polynomial(rng, degree, scale=scale)
        for j in range(i + 1, n):
            re = random_polynomial(rng, degree, scale=scale)
            im = random_polynomial(rng, degree, scale=scale)
            M[i, j] = re + sp.I * im
            M[j, i] = -re + sp.I * im
    return M


def random_pair(rng, n, degree=1, scale=0.5) -> AttenuationPair:
    return AttenuationPair(random_skew_field(rng, n, degree, scale),
                           random_skew_field(rng, n, degree, scale),
                           random_skew_field(rng, n, degree, scale))


def random_rim_vanishing(rng, n, degree=2, power=1) -> sp.Matrix:
    return sp.Matrix([rim_factor(power) * random_polynomial(rng, degree, complex_coeffs=True)
                      for _ in range(n)])


def random_gauge(rng, n, factors=2, scale=1.0) -> sp.Matrix:
    """Product of ``exp(g_k S_k)`` with ``g_k`` vanishing on the rim."""
    Q = sp.eye(n)
    for _ in range(factors):
        A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        S = scale * (A - A.conj().T) / 2
        profile = rim_factor() * random_polynomial(rng, 1)
        Q = Q * exp_gauge(profile, S)
    return Q


def random_tensor(rng, order, *, vanish_on_rim=False, degree=2) -> SymmetricTensor:
    comps = []
    for _ in range(order + 1):
        c = random_polynomial(rng, degree)
        comps.append(rim_factor() * c if vanish_on_rim else c)
    return SymmetricTensor(order, tuple(comps))
