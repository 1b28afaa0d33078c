"""Functions on the unit tangent bundle sampled on a masked grid.

Space is a Cartesian grid over ``[-1, 1]^2`` restricted to the closed disk,
differentiated with 4th-order finite differences (one-sided near the rim).
The fiber direction is spectral: ``V`` multiplies Fourier layer ``k`` by
``i k`` with ``k`` labelled as in :func:`numpy.fft.fftfreq` (the Nyquist layer
carries ``k = -N/2``).

Values are stored only on in-disk nodes as an array of shape
``(points, Ntheta, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import gamma

import numpy as np
import scipy.sparse as sps
import sympy as sp

from .expr import Compiled, theta, x, y
from .fields import AttenuationPair, ConnectionCurvature, SMFunction
from .geometry import MagneticSystem

INTERIOR_RADIUS = 0.8


# --- mesh ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _derivative_weights(offsets: tuple) -> np.ndarray:
    """Weights ``w`` with ``sum w_m f(o_m) = f'(0)`` exactly for polynomials of degree < len."""
    o = np.asarray(offsets, float)
    m = o.size
    V = np.vander(o, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[1] = 1.0
    return np.linalg.solve(V, rhs)


def _segments(mask_line):
    """Start/stop of runs of True in a boolean vector."""
    padded = np.concatenate([[False], mask_line, [False]])
    d = np.diff(padded.astype(int))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def _line_derivative(index, mask, h, axis):
    """Sparse derivative along ``axis`` over runs of in-disk nodes."""
    rows, cols, vals = [], [], []
    n_lines = mask.shape[1 - axis]
    for line in range(n_lines):
        m = mask[:, line] if axis == 0 else mask[line, :]
        idx = index[:, line] if axis == 0 else index[line, :]
        for a, b in _segments(m):
            L = b - a
            if L == 1:
                continue
            width = min(5, L)
            for i in range(L):
                s = min(max(i - 2, 0), L - width)
                offs = tuple(range(s - i, s - i + width))
                w = _derivative_weights(offs) / h
                rows.extend([idx[a + i]] * width)
                cols.extend(idx[a + s + np.arange(width)])
                vals.extend(w)
    P = int(mask.sum())
    return sps.csr_matrix((vals, (rows, cols)), shape=(P, P))


def _disk_moment(a, b):
    if a % 2 or b % 2:
        return 0.0
    beta = gamma((a + 1) / 2) * gamma((b + 1) / 2) / gamma((a + b + 2) / 2)
    return 2 * beta / (a + b + 2)


def _cell_areas(xs, ys, h, gauss=24):
    """Area of each grid cell (centered at the node) inside the unit disk."""
    g, gw = np.polynomial.legendre.leggauss(gauss)
    areas = np.zeros((xs.size, ys.size))
    for i, xc in enumerate(xs):
        lo, hi = max(xc - h / 2, -1.0), min(xc + h / 2, 1.0)
        if hi <= lo:
            continue
        # split at the points where the chord meets the cell's y-edges is not
        # needed for the accuracy we want; many Gauss points suffice
        t = 0.5 * (hi - lo) * g + 0.5 * (hi + lo)
        half = np.sqrt(np.clip(1 - t * t, 0.0, None))
        for j, yc in enumerate(ys):
            seg = np.clip(np.minimum(half, yc + h / 2) - np.maximum(-half, yc - h / 2), 0.0, None)
            areas[i, j] = 0.5 * (hi - lo) * float(gw @ seg)
    return areas


@dataclass(frozen=True, eq=False)
class Mesh:
    """Masked Cartesian grid on the unit disk with FD operators and quadrature."""

    nx: int
    ny: int

    @cached_property
    def xs(self):
        return np.linspace(-1.0, 1.0, self.nx)

    @cached_property
    def ys(self):
        return np.linspace(-1.0, 1.0, self.ny)

    @property
    def hx(self):
        return 2.0 / (self.nx - 1)

    @property
    def hy(self):
        return 2.0 / (self.ny - 1)

    @cached_property
    def mask(self):
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return X * X + Y * Y <= 1.0

    @cached_property
    def index(self):
        idx = np.full(self.mask.shape, -1)
        idx[self.mask] = np.arange(int(self.mask.sum()))
        return idx

    @cached_property
    def points(self):
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return X[self.mask], Y[self.mask]

    @property
    def x(self):
        return self.points[0]

    @property
    def y(self):
        return self.points[1]

    @property
    def size(self):
        return self.x.size

    @cached_property
    def radius(self):
        return np.hypot(self.x, self.y)

    def interior(self, radius=INTERIOR_RADIUS):
        return self.radius <= radius

    @cached_property
    def Dx(self):
        return _line_derivative(self.index, self.mask, self.hx, axis=0)

    @cached_property
    def Dy(self):
        return _line_derivative(self.index, self.mask, self.hy, axis=1)

    @cached_property
    def cut_cell_area(self):
        """Area of each node's cell inside the disk (the 'inside fraction' weights)."""
        if self.nx != self.ny:
            areas = _cell_areas(self.xs, self.ys, max(self.hx, self.hy))
        else:
            areas = _cell_areas(self.xs, self.ys, self.hx)
        return areas[self.mask]

    @cached_property
    def weights(self):
        """Area weights: cut-cell areas, adjusted on the rim layer to integrate
        polynomials of degree <= 8 over the disk exactly."""
        w = self.cut_cell_area.copy()
        h = max(self.hx, self.hy)
        layer = self.radius > 1.0 - 3 * h
        deg = 8
        powers = [(a, d - a) for d in range(deg + 1) for a in range(d + 1)]
        M = np.array([self.x**a * self.y**b for a, b in powers])
        target = np.array([_disk_moment(a, b) for a, b in powers])
        defect = target - M @ w
        Mb = M[:, layer]
        delta, *_ = np.linalg.lstsq(Mb, defect, rcond=None)
        w[layer] += delta
        return w


@lru_cache(maxsize=16)
def get_mesh(nx: int, ny: int | None = None) -> Mesh:
    return Mesh(nx, nx if ny is None else ny)


def _spatial(D, values):
    P = values.shape[0]
    flat = values.reshape(P, -1)
    return np.asarray(D @ flat).reshape(values.shape)


# --- sampled functions ---------------------------------------------------------------

def theta_nodes(ntheta: int) -> np.ndarray:
    return 2 * np.pi * np.arange(ntheta) / ntheta


def wavenumbers(ntheta: int) -> np.ndarray:
    return np.rint(np.fft.fftfreq(ntheta) * ntheta).astype(int)


class FiberGrid:
    """``C^n``-valued samples of a function on SM."""

    def __init__(self, mesh: Mesh, values):
        values = np.asarray(values, dtype=complex)
        if values.ndim == 2:
            values = values[..., None]
        if values.shape[0] != mesh.size:
            raise ValueError("values do not match the mesh")
        nt = values.shape[1]
        if nt < 4 or nt & (nt - 1):
            raise ValueError("Ntheta must be a power of two >= 4")
        self.mesh = mesh
        self.values = values

    @property
    def ntheta(self):
        return self.values.shape[1]

    @property
    def n(self):
        return self.values.shape[2]

    @property
    def thetas(self):
        return theta_nodes(self.ntheta)

    @classmethod
    def from_function(cls, mesh: Mesh, f, ntheta: int):
        th = theta_nodes(ntheta)
        vals = f(mesh.x[:, None], mesh.y[:, None], th[None, :])
        vals = np.asarray(vals, dtype=complex)
        if vals.ndim == 2:
            vals = vals[..., None]
        vals = np.broadcast_to(vals, (mesh.size, ntheta, vals.shape[-1])).copy()
        return cls(mesh, vals)

    @classmethod
    def zeros_like(cls, other: "FiberGrid"):
        return cls(other.mesh, np.zeros_like(other.values))

    def like(self, values):
        return FiberGrid(self.mesh, values)

    def full(self):
        """Values on the full ``(Nx, Ny, Ntheta, n)`` grid, nan off the disk."""
        out = np.full(self.mesh.mask.shape + self.values.shape[1:], np.nan, dtype=complex)
        out[self.mesh.mask] = self.values
        return out

    def __add__(self, other):
        return self.like(self.values + (other.values if isinstance(other, FiberGrid) else other))

    def __sub__(self, other):
        return self.like(self.values - (other.values if isinstance(other, FiberGrid) else other))

    def __mul__(self, scalar):
        return self.like(self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)

    def sup(self, region=None):
        v = np.abs(self.values)
        if region is not None:
            v = v[region]
        return float(v.max()) if v.size else 0.0


@dataclass
class FourierStack:
    """Fiberwise Fourier coefficients, stored in FFT order along axis 1."""

    mesh: Mesh
    coefficients: np.ndarray  # (points, Ntheta, n)

    @property
    def ntheta(self):
        return self.coefficients.shape[1]

    @property
    def k(self):
        return wavenumbers(self.ntheta)

    def layer(self, k: int) -> np.ndarray:
        hits = np.flatnonzero(self.k == k)
        if not hits.size:
            return np.zeros((self.mesh.size, self.coefficients.shape[2]), complex)
        return self.coefficients[:, hits[0]]

    def like(self, coefficients):
        return FourierStack(self.mesh, coefficients)

    def layer_mass(self, weights=None) -> np.ndarray:
        """Squared L2 mass of each layer (FFT order)."""
        w = self.mesh.weights if weights is None else weights
        return np.einsum("p,pkn->k", w, np.abs(self.coefficients) ** 2)


def fourier_decompose(grid: FiberGrid) -> FourierStack:
    return FourierStack(grid.mesh, np.fft.fft(grid.values, axis=1) / grid.ntheta)


def fourier_reconstruct(stack: FourierStack) -> FiberGrid:
    return FiberGrid(stack.mesh, np.fft.ifft(stack.coefficients, axis=1) * stack.ntheta)


def _mode_multiply(grid_or_stack, factor):
    if isinstance(grid_or_stack, FourierStack):
        return grid_or_stack.like(grid_or_stack.coefficients * factor[None, :, None])
    coeffs = np.fft.fft(grid_or_stack.values, axis=1)
    return grid_or_stack.like(np.fft.ifft(coeffs * factor[None, :, None], axis=1))


def apply_V(grid):
    """Spectral ``d/dtheta``; works on grids and stacks."""
    return _mode_multiply(grid, 1j * wavenumbers(grid.ntheta))


def hilbert_transform(grid):
    """Multiply layer ``k`` by ``-sgn(k) i``."""
    return _mode_multiply(grid, -1j * np.sign(wavenumbers(grid.ntheta)))


def zero_mode(grid: FiberGrid) -> FiberGrid:
    mean = grid.values.mean(axis=1, keepdims=True)
    return grid.like(np.broadcast_to(mean, grid.values.shape).copy())


def holomorphic_project(grid, strict: bool = False):
    """``(Id + iH) u = u_0 + 2 sum_{k>=1} u_k``; ``strict`` keeps ``u_0 + sum_{k>=1} u_k``."""
    k = wavenumbers(grid.ntheta)
    factor = np.where(k > 0, 1.0 if strict else 2.0, 0.0) + (k == 0)
    return _mode_multiply(grid, factor.astype(complex))


def antiholomorphic_project(grid, strict: bool = False):
    """``(Id - iH) u = u_0 + 2 sum_{k<=-1} u_k``."""
    k = wavenumbers(grid.ntheta)
    factor = np.where(k < 0, 1.0 if strict else 2.0, 0.0) + (k == 0)
    return _mode_multiply(grid, factor.astype(complex))


# --- geometry at the nodes ------------------------------------------------------------

class NodeGeometry:
    """Coefficient fields of a magnetic system evaluated on a mesh."""

    def __init__(self, system: MagneticSystem, mesh: Mesh):
        self.system = system
        self.mesh = mesh
        s = system.surface
        px, py = s.grad_expr
        lx, ly = system.lam_grad_expr
        vals = Compiled([s.phi, px, py, s.curvature_expr, system.lam, lx, ly])(mesh.x, mesh.y).real
        self.phi, self.phi_x, self.phi_y, self.K, self.lam, self.lam_x, self.lam_y = vals.T
        self.em = np.exp(-self.phi)
        self.volume = mesh.weights * np.exp(2 * self.phi)

    def trig(self, ntheta):
        th = theta_nodes(ntheta)
        return np.cos(th)[None, :], np.sin(th)[None, :]

    def xperp_lambda(self, ntheta):
        c, s = self.trig(ntheta)
        return -self.em[:, None] * (-s * self.lam_x[:, None] + c * self.lam_y[:, None])


@lru_cache(maxsize=32)
def node_geometry(system: MagneticSystem, mesh: Mesh) -> NodeGeometry:
    return NodeGeometry(system, mesh)


def _col(a):
    return a[:, None, None]


def apply_X(system: MagneticSystem, grid: FiberGrid) -> FiberGrid:
    g = node_geometry(system, grid.mesh)
    c, s = g.trig(grid.ntheta)
    c, s = c[..., None], s[..., None]
    ux = _spatial(grid.mesh.Dx, grid.values)
    uy = _spatial(grid.mesh.Dy, grid.values)
    vu = apply_V(grid).values
    out = c * ux + s * uy + (-_col(g.phi_x) * s + _col(g.phi_y) * c) * vu
    return grid.like(_col(g.em) * out)


def apply_Xperp(system: MagneticSystem, grid: FiberGrid) -> FiberGrid:
    g = node_geometry(system, grid.mesh)
    c, s = g.trig(grid.ntheta)
    c, s = c[..., None], s[..., None]
    ux = _spatial(grid.mesh.Dx, grid.values)
    uy = _spatial(grid.mesh.Dy, grid.values)
    vu = apply_V(grid).values
    out = -s * ux + c * uy - (_col(g.phi_x) * c + _col(g.phi_y) * s) * vu
    return grid.like(-_col(g.em) * out)


def apply_flow(system: MagneticSystem, grid: FiberGrid) -> FiberGrid:
    """``(X + lam V) u``."""
    g = node_geometry(system, grid.mesh)
    return grid.like(apply_X(system, grid).values + _col(g.lam) * apply_V(grid).values)


class PairOnMesh:
    """Attenuation-pair matrices evaluated on a mesh."""

    def __init__(self, system: MagneticSystem, pair: AttenuationPair, mesh: Mesh):
        self.pair = pair
        m = pair.evaluator(mesh.x, mesh.y)
        self.A_x, self.A_y, self.Phi = m[:, 0], m[:, 1], m[:, 2]
        curv = ConnectionCurvature(system.surface, pair).evaluator(mesh.x, mesh.y)
        self.star_FA, self.dA_x, self.dA_y = curv[:, 0], curv[:, 1], curv[:, 2]
        self.em = node_geometry(system, mesh).em

    def _on_sm(self, mx, my, ntheta, rotate):
        th = theta_nodes(ntheta)
        c, s = np.cos(th)[None, :, None, None], np.sin(th)[None, :, None, None]
        em = self.em[:, None, None, None]
        if rotate:  # velocity turned by -90 degrees
            return em * (mx[:, None] * s - my[:, None] * c)
        return em * (mx[:, None] * c + my[:, None] * s)

    def attenuation(self, ntheta):
        """``A(x, v) + Phi(x)``, shape ``(points, Ntheta, n, n)``."""
        return self._on_sm(self.A_x, self.A_y, ntheta, False) + self.Phi[:, None]

    def connection(self, ntheta):
        return self._on_sm(self.A_x, self.A_y, ntheta, False)

    def star_connection(self, ntheta):
        return self._on_sm(self.A_x, self.A_y, ntheta, True)

    def star_dA_Phi(self, ntheta):
        return self._on_sm(self.dA_x, self.dA_y, ntheta, True)


@lru_cache(maxsize=32)
def pair_on_mesh(system, pair, mesh) -> PairOnMesh:
    return PairOnMesh(system, pair, mesh)


def _matvec(M, grid: FiberGrid) -> FiberGrid:
    if M.ndim == 3:
        return grid.like(np.einsum("pij,ptj->pti", M, grid.values))
    return grid.like(np.einsum("ptij,ptj->pti", M, grid.values))


def apply_P(system: MagneticSystem, pair: AttenuationPair, grid: FiberGrid) -> FiberGrid:
    """``(X + lam V + A + Phi) u``."""
    pm = pair_on_mesh(system, pair, grid.mesh)
    return apply_flow(system, grid) + _matvec(pm.attenuation(grid.ntheta), grid)


def apply_B(system, pair, grid: FiberGrid) -> FiberGrid:
    """``(X_perp + *A) u``."""
    pm = pair_on_mesh(system, pair, grid.mesh)
    return apply_Xperp(system, grid) + _matvec(pm.star_connection(grid.ntheta), grid)


def inner(system: MagneticSystem, u: FiberGrid, v: FiberGrid) -> complex:
    """``<u, v>`` in ``L^2(SM, dSigma^3)``, linear in ``u``."""
    g = node_geometry(system, u.mesh)
    dth = 2 * np.pi / u.ntheta
    return complex(np.einsum("p,ptn,ptn->", g.volume, u.values, np.conj(v.values)) * dth)


def norm2(system, u: FiberGrid) -> float:
    return inner(system, u, u).real


# --- identities ---------------------------------------------------------------------

def structure_residuals(system: MagneticSystem, grid: FiberGrid, region=None) -> dict:
    """Sup-norm residuals of ``[V,X]+X_perp``, ``[V,X_perp]-X`` and ``[X,X_perp]+KV``."""
    region = grid.mesh.interior() if region is None else region
    g = node_geometry(system, grid.mesh)
    Xu, Pu, Vu = apply_X(system, grid), apply_Xperp(system, grid), apply_V(grid)
    r1 = apply_V(Xu) - apply_X(system, Vu) + Pu
    r2 = apply_V(Pu) - apply_Xperp(system, Vu) - Xu
    r3 = apply_X(system, Pu) - apply_Xperp(system, Xu) + Vu.like(_col(g.K) * Vu.values)
    return {"VX": r1.sup(region), "VXperp": r2.sup(region), "XXperp": r3.sup(region)}


def commutator_residual(system: MagneticSystem, pair: AttenuationPair, u: FiberGrid,
                        region=None) -> float:
    """Sup over interior nodes of ``[H, P] u - B u_0 - (B u)_0`` with ``B = X_perp + *A``."""
    region = u.mesh.interior() if region is None else region
    lhs = hilbert_transform(apply_P(system, pair, u)) - apply_P(system, pair, hilbert_transform(u))
    rhs = apply_B(system, pair, zero_mode(u)) + zero_mode(apply_B(system, pair, u))
    return (lhs - rhs).sup(region)


def energy_identity_terms(system: MagneticSystem, pair: AttenuationPair, u: FiberGrid) -> dict:
    g = node_geometry(system, u.mesh)
    pm = pair_on_mesh(system, pair, u.mesh)
    nt = u.ntheta
    ip = lambda a, b: inner(system, a, b)  # noqa: E731
    Vu = apply_V(u)
    Pu = apply_P(system, pair, u)
    PVu = apply_P(system, pair, Vu)
    VPu = apply_V(Pu)
    Phi_u = _matvec(pm.Phi, u)
    XAPhi_u = apply_X(system, u) + _matvec(pm.attenuation(nt), u)
    lamVu = Vu.like(_col(g.lam) * Vu.values)
    q = (g.K[:, None] + g.xperp_lambda(nt) + g.lam[:, None] ** 2)[..., None]
    terms = {
        "|P Vu|^2": norm2(system, PVu),
        "<*F u, Vu>": ip(_matvec(pm.star_FA, u), Vu).real,
        "<*dPhi u, Vu>": ip(_matvec(pm.star_dA_Phi(nt), u), Vu).real,
        "<lam Vu, Phi u>": ip(lamVu, Phi_u).real,
        "<Phi u, (X+A+Phi) u>": ip(Phi_u, XAPhi_u).real,
        "<q Vu, Vu>": ip(Vu.like(q * Vu.values), Vu).real,
        "|V P u|^2": norm2(system, VPu),
        "|P u|^2": norm2(system, Pu),
    }
    terms["lhs"] = (terms["|P Vu|^2"] - terms["<*F u, Vu>"] - terms["<*dPhi u, Vu>"]
                    - 2 * terms["<lam Vu, Phi u>"] - terms["<Phi u, (X+A+Phi) u>"]
                    - terms["<q Vu, Vu>"])
    terms["rhs"] = terms["|V P u|^2"] - terms["|P u|^2"]
    return terms


def relative_residual(a: float, b: float) -> float:
    den = abs(a) + abs(b)
    return 0.0 if den == 0 else abs(a - b) / den


def energy_identity_residual(system, pair, u: FiberGrid) -> float:
    t = energy_identity_terms(system, pair, u)
    return relative_residual(t["lhs"], t["rhs"])


def parts_residuals(system, pair, u: FiberGrid, g: FiberGrid) -> dict:
    """Integration by parts for ``V`` and for ``P = X + lam V + A + Phi``."""
    v1, v2 = inner(system, apply_V(u), g), -inner(system, u, apply_V(g))
    p1, p2 = inner(system, apply_P(system, pair, u), g), -inner(system, u, apply_P(system, pair, g))
    return {"V": abs(v1 - v2) / max(abs(v1) + abs(v2), 1e-300),
            "P": abs(p1 - p2) / max(abs(p1) + abs(p2), 1e-300)}


def lemma52_residual(system, pair, p_grid: FiberGrid, F_grid: FiberGrid) -> float:
    """Relative defect of ``int |V P u|^2 - |P u|^2 + |F|^2 = 0`` for ``u = p``."""
    Pu = apply_P(system, pair, p_grid)
    terms = norm2(system, apply_V(Pu)), norm2(system, Pu), norm2(system, F_grid)
    scale = sum(terms)
    return 0.0 if scale == 0 else abs(terms[0] - terms[1] + terms[2]) / scale


def lemma54_quantity(system, pair, u: FiberGrid) -> float:
    """``||P V u||^2 - <(K + X_perp lam + lam^2) V u, V u>``."""
    g = node_geometry(system, u.mesh)
    Vu = apply_V(u)
    q = (g.K[:, None] + g.xperp_lambda(u.ntheta) + g.lam[:, None] ** 2)[..., None]
    return norm2(system, apply_P(system, pair, Vu)) - inner(system, Vu.like(q * Vu.values), Vu).real


def riccati_completed_square(system, pair, u: FiberGrid, r: FiberGrid) -> float:
    """``||P V u - r V u||^2`` for a real Riccati solution ``r`` sampled on the grid."""
    Vu = apply_V(u)
    return norm2(system, apply_P(system, pair, Vu) - Vu.like(r.values * Vu.values))


def flat_riccati_function(lam: float) -> sp.Expr:
    """Real solution of ``(X + lam V) r + r^2 + lam^2 = 0`` on the flat disk, constant ``lam``, |lam| < 1."""
    c, s = sp.cos(theta), sp.sin(theta)
    lam = sp.nsimplify(lam)
    return -lam**2 * (x * c + y * s) / (1 + lam * (-x * s + y * c))


# --- test functions -----------------------------------------------------------------

def random_band_limited(rng, n=1, max_degree=3, boundary_power=0) -> SMFunction:
    """Random trigonometric polynomial in ``theta`` with smooth non-polynomial spatial coefficients."""
    comps = []
    for _ in range(n):
        total = sp.Integer(0)
        for k in range(-max_degree, max_degree + 1):
            a, b, c, d = (float(v) for v in rng.uniform(-1.5, 1.5, 4))
            amp = complex(*rng.uniform(-1, 1, 2))
            coeff = amp * sp.sin(a * x + b * y + c) * sp.exp(d * x * y / 2)
            total += coeff * sp.exp(sp.I * k * theta)
        if boundary_power:
            total *= (1 - x**2 - y**2) ** boundary_power
        comps.append(total)
    return SMFunction(comps)


def grid_of(mesh: Mesh, f: SMFunction, ntheta: int) -> FiberGrid:
    return FiberGrid.from_function(mesh, f, ntheta)


# --- holomorphic integrating factors -------------------------------------------------

@dataclass
class IntegratingFactor:
    omega: FiberGrid
    layers: np.ndarray  # wavenumbers of the unknown layers
    coefficients: np.ndarray  # (layers, basis) in the orthonormal spatial basis
    residual: float
    converged: bool
    layer_values: np.ndarray = None  # (points, layers)

    def sampled(self, ntheta: int) -> FiberGrid:
        """``omega`` on ``ntheta`` fiber nodes."""
        th = theta_nodes(ntheta)
        vals = self.layer_values @ np.exp(1j * np.outer(self.layers, th))
        return FiberGrid(self.omega.mesh, vals[..., None])


class PolynomialBasis:
    """Monomials ``z^a zbar^b`` (a + b <= degree), orthonormalised in the weighted L2 of a mesh."""

    def __init__(self, mesh: Mesh, degree: int, volume):
        z = mesh.x + 1j * mesh.y
        zb = np.conj(z)
        pairs = [(a, d - a) for d in range(degree + 1) for a in range(d + 1)]
        B = np.stack([z**a * zb**b for a, b in pairs], axis=1)
        Bz = np.stack([a * z ** max(a - 1, 0) * zb**b for a, b in pairs], axis=1)
        Bzb = np.stack([b * z**a * zb ** max(b - 1, 0) for a, b in pairs], axis=1)
        _, R = np.linalg.qr(np.sqrt(volume)[:, None] * B)
        Ri = np.linalg.inv(R)
        self.values, self.dz, self.dzb = B @ Ri, Bz @ Ri, Bzb @ Ri
        self.size = len(pairs)


def solve_integrating_factor(system: MagneticSystem, attenuation: SMFunction, mesh: Mesh,
                             K_max: int = 16, holomorphic: bool = True, *, ntheta: int = 64,
                             degree: int = 10, tol: float = 1e-3,
                             warm: IntegratingFactor | None = None,
                             cutoff: float = 1e-12) -> IntegratingFactor:
    """Least-squares ``omega`` in layers ``0..K_max`` (or ``-K_max..0``) with ``(X + lam V) omega = -calA``.

    Each layer is a polynomial in ``z, zbar`` of the given degree (exact
    derivatives); the residual is the weighted L2 norm over all in-disk
    nodes relative to ``||calA||``.  Layers act through
    ``eta_+ (w e^{ik theta}) = e^{-phi}(d_z w - k d_z phi w) e^{i(k+1) theta}``,
    ``eta_- (w e^{ik theta}) = e^{-phi}(d_zbar w + k d_zbar phi w) e^{i(k-1) theta}``
    and ``lam V``.  ``converged`` reports whether the residual met ``tol``.
    ``warm`` (a solution with fewer layers) seeds the solve, so the residual
    never increases along a ladder of ``K_max`` values.
    """
    if attenuation.n != 1:
        raise ValueError("the integrating-factor solver is scalar (n = 1)")
    if ntheta < 2 * K_max + 4:
        ntheta = 1 << int(np.ceil(np.log2(2 * K_max + 4)))
    g = node_geometry(system, mesh)
    layers = np.arange(0, K_max + 1) if holomorphic else np.arange(-K_max, 1)
    a = attenuation_layers(system, attenuation, mesh)
    basis = PolynomialBasis(mesh, degree, g.volume)
    em = g.em[:, None]
    dz_phi = (0.5 * (g.phi_x - 1j * g.phi_y))[:, None]
    dzb_phi = (0.5 * (g.phi_x + 1j * g.phi_y))[:, None]
    # (X + lam V)(w e^{ik theta}) splits into pieces linear in k
    pieces = [em * basis.dz, -em * dz_phi * basis.values, em * basis.dzb,
              em * dzb_phi * basis.values, 1j * g.lam[:, None] * basis.values]
    contributions = {}  # out layer -> [(unknown index, piece, coefficient)]
    for j, k in enumerate(layers):
        contributions.setdefault(k + 1, []).extend([(j, 0, 1.0), (j, 1, float(k))])
        contributions.setdefault(k - 1, []).extend([(j, 2, 1.0), (j, 3, float(k))])
        contributions.setdefault(k, []).append((j, 4, float(k)))
    wv = g.volume[:, None]
    gram = [[pieces[p].conj().T @ (wv * pieces[q]) for q in range(5)] for p in range(5)]
    nb, nl = basis.size, layers.size
    G = np.zeros((nl, nb, nl, nb), complex)
    rhs = np.zeros((nl, nb), complex)
    for o, terms in contributions.items():
        b_o = -a.get(o, np.zeros(mesh.size))
        proj = [pieces[p].conj().T @ (g.volume * b_o) for p in range(5)] if o in a else None
        for j, p, c in terms:
            if proj is not None:
                rhs[j] += c * proj[p]
            for j2, q, c2 in terms:
                G[j, :, j2, :] += c * c2 * gram[p][q]
    G = G.reshape(nl * nb, nl * nb)
    x0 = np.zeros((nl, nb), complex)
    if warm is not None:
        for j, k in enumerate(warm.layers):
            hit = np.flatnonzero(layers == k)
            if hit.size and warm.coefficients.shape[1] == nb:
                x0[hit[0]] = warm.coefficients[j]
    x0 = x0.ravel()
    # minimum-norm correction on top of the warm start, Jacobi scaled; the
    # homogeneous equation has holomorphic solutions (first integrals of the
    # flow), so the plain normal equations are singular
    diag = np.abs(np.diag(G))
    scale = np.where(diag > 1e-14 * diag.max(), 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 0.0)
    Gs = scale[:, None] * G * scale[None, :]
    rs = scale * (rhs.ravel() - G @ x0)
    ev, vec = np.linalg.eigh(Gs)
    keep = ev > cutoff * ev.max()
    delta = vec[:, keep] @ ((vec[:, keep].conj().T @ rs) / ev[keep])
    sol = x0 + scale * delta
    sol = sol.reshape(nl, nb)
    num = den = 0.0
    for o, terms in contributions.items():
        r = np.zeros(mesh.size, complex)
        for j, p, c in terms:
            r += c * (pieces[p] @ sol[j])
        r += a.get(o, 0.0)
        num += float(g.volume @ np.abs(r) ** 2)
    for v in a.values():
        den += float(g.volume @ np.abs(v) ** 2)
    residual = 0.0 if den == 0 else float(np.sqrt(num / den))
    if warm is not None and residual > warm.residual:
        # the seed is feasible in the larger space; never report worse
        sol, residual = x0.reshape(nl, nb), warm.residual
    layer_values = basis.values @ sol.T
    th = theta_nodes(ntheta)
    omega = FiberGrid(mesh, (layer_values @ np.exp(1j * np.outer(layers, th)))[..., None])
    return IntegratingFactor(omega, layers, sol, residual, residual <= tol, layer_values)


def attenuation_layers(system, attenuation: SMFunction, mesh: Mesh, ntheta: int = 16):
    """Fourier layers -1, 0, 1 of a scalar attenuation; rejects fiber degree > 1."""
    grid = FiberGrid.from_function(mesh, attenuation, ntheta)
    stack = fourier_decompose(grid)
    outside = np.abs(stack.coefficients[:, np.abs(stack.k) > 1]).max(initial=0.0)
    if outside > 1e-10 * max(1.0, np.abs(stack.coefficients).max()):
        raise ValueError("attenuation must have fiber degree <= 1")
    return {k: stack.layer(k)[:, 0] for k in (-1, 0, 1)}


def shift_residual(system, attenuation: SMFunction, factor: IntegratingFactor, u: FiberGrid,
                   s: float, region=None) -> float:
    """Relative defect of ``(X + lam V + s calA)(e^{s omega} u) = e^{s omega} (X + lam V) u``."""
    region = u.mesh.interior() if region is None else region
    a = FiberGrid.from_function(u.mesh, attenuation, u.ntheta)
    e = np.exp(s * factor.sampled(u.ntheta).values)
    eu = u.like(e * u.values)
    lhs = apply_flow(system, eu) + eu.like(s * a.values * eu.values)
    rhs = u.like(e * apply_flow(system, u).values)
    return (lhs - rhs).sup(region) / max(rhs.sup(region), 1e-300)
