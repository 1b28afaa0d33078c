"""Verification and probe suites shared by the CLI and the acceptance tests.

A suite returns a :class:`SuiteResult`; refinement rows are
``(resolution, quantity, residual)`` triples written as CSV by the CLI.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .expr import theta
from .fiber import (
    apply_V, commutator_residual, energy_identity_residual, flat_riccati_function,
    get_mesh, grid_of, hilbert_transform, lemma52_residual, lemma54_quantity, norm2,
    apply_P, parts_residuals, random_band_limited, riccati_completed_square,
    solve_integrating_factor, structure_residuals, zero_mode,
)
from .fields import AttenuationPair, SMFunction, random_rim_vanishing
from .geometry import MagneticSystem
from .probes import (
    probe_degree_reduction, probe_gauge_determination, probe_kernel_forward,
    probe_nullspace_svd, probe_tensor_tomography,
)

ROUNDOFF_FLOOR = 1e-10
MONOTONE_SLACK = 1e-12
K_LADDER = (4, 8, 16, 32)


@dataclass
class SuiteResult:
    suite: str
    resolution: list
    residual: float
    passed: bool
    metrics: dict = field(default_factory=dict)
    refinement: list = field(default_factory=list)

    def to_dict(self, config_hash="", seed=None):
        return {"suite": self.suite, "resolution": list(self.resolution),
                "residual": self.residual, "pass": self.passed, "metrics": self.metrics,
                "config_hash": config_hash, "seed": seed}


def suite_rng(seed: int, name: str):
    """Per-suite generator; independent of which other suites run."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def refinement_levels(nx: int, count: int) -> list[int]:
    """``count`` mesh sizes ending at ``nx``, each a halving of the spacing of the next."""
    levels = [nx]
    while len(levels) < count:
        coarser = (levels[0] - 1) // 2 + 1
        if coarser < 9:
            break
        levels.insert(0, coarser)
    return levels


def _is_trivial(system: MagneticSystem, pair: AttenuationPair) -> bool:
    zero = all(m.is_zero_matrix for m in (pair.A_x, pair.A_y, pair.Phi))
    return zero and sp.sympify(system.lam) == 0 and sp.sympify(system.surface.phi) == 0


def _constant_lambda(system):
    lam = sp.sympify(system.lam)
    return None if lam.free_symbols else float(lam)


def _nonincreasing(values, slack=MONOTONE_SLACK) -> bool:
    return all(b <= a + slack for a, b in zip(values, values[1:]))


# --- verify suites -------------------------------------------------------------------

def verify_structure(system, pair, grid, rng, *, levels=None, n_functions=1, ratio_min=10.0):
    nx, _, nt = grid
    levels = levels or refinement_levels(nx, 3)
    funcs = [random_band_limited(rng, 1, 3) for _ in range(n_functions)]
    rows, worst = [], {}
    for N in levels:
        mesh = get_mesh(N)
        res = {"VX": 0.0, "VXperp": 0.0, "XXperp": 0.0}
        for f in funcs:
            for key, val in structure_residuals(system, grid_of(mesh, f, nt)).items():
                res[key] = max(res[key], val)
        for key, val in res.items():
            rows.append((N, key, val))
        worst[N] = res
    ratios, ok = {}, True
    for key in ("VX", "VXperp", "XXperp"):
        seq = [worst[N][key] for N in levels]
        r = [a / b if b > 0 else float("inf") for a, b in zip(seq, seq[1:])]
        ratios[key] = r
        # at the roundoff floor there is nothing left to converge
        ok &= seq[-1] < ROUNDOFF_FLOOR or (len(r) > 0 and r[-1] >= ratio_min)
    final = max(worst[levels[-1]].values())
    return SuiteResult("structure", [levels[-1], levels[-1], nt], final, bool(ok),
                       {"ratios": ratios, "levels": levels}, rows)


def verify_commutator(system, pair, grid, rng, *, levels=None):
    nx, _, nt = grid
    levels = levels or refinement_levels(nx, 2)
    u = random_band_limited(rng, pair.n, 3, boundary_power=2)
    rows = [(N, "commutator", commutator_residual(system, pair, grid_of(get_mesh(N), u, nt)))
            for N in levels]
    tol = 1e-4 if _is_trivial(system, pair) else 1e-3
    final = rows[-1][2]
    return SuiteResult("commutator", [levels[-1], levels[-1], nt], final, final < tol,
                       {"tolerance": tol}, rows)


def verify_energy(system, pair, grid, rng, *, levels=None):
    nx, _, nt = grid
    levels = levels or refinement_levels(nx, 2)
    u = random_band_limited(rng, pair.n, 3, boundary_power=2)
    rows = [(N, "energy", energy_identity_residual(system, pair, grid_of(get_mesh(N), u, nt)))
            for N in levels]
    tol = 1e-3 if pair.n == 1 and _is_trivial(system, pair) else 1e-2
    seq = [r[2] for r in rows]
    ok = seq[-1] < tol and _nonincreasing(seq, 1e-9)
    return SuiteResult("energy", [levels[-1], levels[-1], nt], seq[-1], bool(ok),
                       {"tolerance": tol}, rows)


def verify_hilbert(system, pair, grid, rng):
    nx, ny, nt = grid
    u = grid_of(get_mesh(nx, ny), random_band_limited(rng, pair.n, min(8, nt // 2 - 1)), nt)
    lhs = hilbert_transform(hilbert_transform(u))
    rhs = -(u - zero_mode(u))
    res = (lhs - rhs).sup() / max(u.sup(), 1e-300)
    return SuiteResult("hilbert", [nx, ny, nt], res, res < 1e-13, {}, [(nx, "hilbert", res)])


def verify_parts(system, pair, grid, rng):
    nx, ny, nt = grid
    mesh = get_mesh(nx, ny)
    u = grid_of(mesh, random_band_limited(rng, pair.n, 3, boundary_power=2), nt)
    g = grid_of(mesh, random_band_limited(rng, pair.n, 3, boundary_power=2), nt)
    res = parts_residuals(system, pair, u, g)
    ok = res["V"] < 1e-12 and res["P"] < 1e-3
    return SuiteResult("parts", [nx, ny, nt], res["P"], bool(ok), {"V": res["V"], "P": res["P"]},
                       [(nx, "V", res["V"]), (nx, "P", res["P"])])


def verify_lemma52(system, pair, grid, rng, *, levels=None):
    nx, _, nt = grid
    levels = levels or refinement_levels(nx, 2)
    p = random_rim_vanishing(rng, pair.n, power=2)
    p_fn, F_fn = SMFunction(list(p)), SMFunction(list(pair.Phi * p))
    rows = []
    for N in levels:
        mesh = get_mesh(N)
        rows.append((N, "lemma52", lemma52_residual(system, pair, grid_of(mesh, p_fn, nt),
                                                    grid_of(mesh, F_fn, nt))))
    final = rows[-1][2]
    return SuiteResult("lemma52", [levels[-1], levels[-1], nt], final, final < 1e-3, {}, rows)


def verify_lemma54(system, pair, grid, rng, *, n_functions=3):
    """The quantity must be nonnegative up to ``1e-3`` of its scale.

    On the flat disk with constant ``|lam| < 1`` and a trivial pair it is also
    compared with the completed square built from the closed-form Riccati solution.
    """
    nx, ny, nt = grid
    mesh = get_mesh(nx, ny)
    worst, rows, cross = np.inf, [], None
    lam = _constant_lambda(system)
    flat_trivial = (sp.sympify(system.surface.phi) == 0 and lam is not None and abs(lam) < 1
                    and all(m.is_zero_matrix for m in (pair.A_x, pair.A_y, pair.Phi)))
    for i in range(n_functions):
        u = grid_of(mesh, random_band_limited(rng, pair.n, 3, boundary_power=2), nt)
        q = lemma54_quantity(system, pair, u)
        scale = max(norm2(system, apply_P(system, pair, apply_V(u))), 1e-300)
        rel = q / scale
        worst = min(worst, rel)
        rows.append((nx, f"quantity/scale[{i}]", rel))
        if flat_trivial:
            r = grid_of(mesh, SMFunction([flat_riccati_function(lam)]), nt)
            sq = riccati_completed_square(system, pair, u, r)
            diff = abs(q - sq) / scale
            cross = diff if cross is None else max(cross, diff)
            rows.append((nx, f"riccati_cross_check[{i}]", diff))
    ok = worst >= -1e-3 and (cross is None or cross < 1e-3)
    metrics = {"min_relative_quantity": worst}
    if cross is not None:
        metrics["riccati_cross_check"] = cross
    return SuiteResult("lemma54", [nx, ny, nt], max(0.0, -worst), bool(ok), metrics, rows)


DEFAULT_INTFACTOR_ATTENUATION = SMFunction([sp.cos(theta)])


def intfactor_ladder(system, attenuation, mesh, ladder=K_LADDER, ntheta=64):
    """Solve along increasing ``K_max``, warm-starting each solve from the previous."""
    out, warm = [], None
    for K in ladder:
        warm = solve_integrating_factor(system, attenuation, mesh, K, ntheta=ntheta, warm=warm)
        out.append((K, warm))
    return out


def verify_intfactor(system, pair, grid, rng, *, attenuation=None):
    nx, ny, nt = grid
    att = attenuation if attenuation is not None else DEFAULT_INTFACTOR_ATTENUATION
    ladder = intfactor_ladder(system, att, get_mesh(nx, ny), ntheta=nt)
    seq = [f.residual for _, f in ladder]
    at16 = dict((K, f.residual) for K, f in ladder)[16]
    ok = at16 < 1e-3 and _nonincreasing(seq)
    rows = [(nx, f"K_max={K}", f.residual) for K, f in ladder]
    return SuiteResult("intfactor", [nx, ny, nt], at16, bool(ok),
                       {"ladder": dict((str(K), r) for K, r in zip(K_LADDER, seq))}, rows)


VERIFY = {
    "structure": verify_structure, "commutator": verify_commutator, "energy": verify_energy,
    "hilbert": verify_hilbert, "parts": verify_parts, "lemma52": verify_lemma52,
    "lemma54": verify_lemma54, "intfactor": verify_intfactor,
}


# --- probe suites --------------------------------------------------------------------

def _nonzero(pair):
    return not all(m.is_zero_matrix for m in (pair.A_x, pair.A_y, pair.Phi))


def run_probe(name, system, pair, *, fan_size, dt, seed):
    """Run one probe; the configured pair is used when it is nonzero, random draws otherwise."""
    chosen = pair if _nonzero(pair) else None
    if name == "kernel":
        return probe_kernel_forward(system, chosen, 10, fan_size, n=pair.n, dt=dt, seed=seed)
    if name == "gauge":
        return probe_gauge_determination(system, chosen, None, fan_size, n_draws=10,
                                         n=max(pair.n, 2) if chosen is None else pair.n,
                                         dt=dt, seed=seed)
    if name == "tensor":
        return probe_tensor_tomography(system, 3, 3, fan_size, dt=dt, seed=seed)
    if name == "degree":
        return probe_degree_reduction(system, m=3, dt=dt, seed=seed)
    if name == "nullspace":
        return probe_nullspace_svd(system, chosen, 3, fan_size, dt=dt, seed=seed)
    raise KeyError(name)


__all__ = ["SuiteResult", "VERIFY", "intfactor_ladder", "refinement_levels", "run_probe",
           "suite_rng"] + [f"verify_{k}" for k in VERIFY]
