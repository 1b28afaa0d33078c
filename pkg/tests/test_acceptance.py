"""Acceptance criteria at their stated tolerances and time budgets.

Each test records one summary line; the block is printed at the end of the run.
"""

import math
import time

import numpy as np
import sympy as sp

from magtomo.expr import theta, x, y
from magtomo.fields import AttenuationPair, SMFunction, random_pair
from magtomo.fiber import (
    commutator_residual, energy_identity_residual, get_mesh, grid_of, random_band_limited,
)
from magtomo.flow import (
    PhasePoint, entry_state, exit_time, integrate_geodesic, solve_riccati, solve_riccati_fan,
)
from magtomo.geometry import BoundaryPoint, MagneticSystem, Surface, boundary_fan
from magtomo.probes import (
    probe_degree_reduction, probe_gauge_determination, probe_kernel_forward, probe_nullspace_svd,
    probe_tensor_tomography,
)
from magtomo.suites import intfactor_ladder, verify_structure
from magtomo.transform import constant_scalar_oracle, transport_fan

RIM = 1 - x**2 - y**2
CURVED = MagneticSystem(Surface.bump(0.2), "0.3 + 0.1*x")


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_c01_structure_equations(acceptance):
    with Clock() as c:
        res = verify_structure(CURVED, None, (257, 257, 16), np.random.default_rng(101),
                               levels=[65, 129, 257], n_functions=5)
    ratios = res.metrics["ratios"]["XXperp"]
    floor = max(v for N, k, v in res.refinement if k in ("VX", "VXperp"))
    ok = min(ratios) > 10 and max(ratios) < 24 and floor < 1e-10 and c.elapsed < 60
    acceptance(1, "structure equations", ok,
               f"[X,X_perp]+KV ratios {ratios[0]:.1f}, {ratios[1]:.1f}; "
               f"[V,X]/[V,X_perp] at roundoff {floor:.1e}; {c.elapsed:.1f}s")
    assert ok


def test_c02_commutator(acceptance):
    with Clock() as c:
        m = get_mesh(129)
        u = grid_of(m, SMFunction([RIM * sp.exp(sp.I * theta)]), 64)
        scalar = commutator_residual(MagneticSystem(Surface.flat(), 0), AttenuationPair.zero(1), u)
        rng = np.random.default_rng(102)
        pair = random_pair(rng, 2)
        v = grid_of(m, random_band_limited(rng, 2, 3, boundary_power=2), 64)
        general = commutator_residual(CURVED, pair, v)
    ok = scalar < 1e-4 and general < 1e-3 and c.elapsed < 120
    acceptance(2, "commutator formula", ok,
               f"flat scalar {scalar:.2e}, n=2 general {general:.2e}; {c.elapsed:.1f}s")
    assert ok


def test_c03_energy_identity(acceptance):
    with Clock() as c:
        u = grid_of(get_mesh(129), SMFunction([RIM * sp.exp(sp.I * theta)]), 64)
        scalar = energy_identity_residual(MagneticSystem(Surface.flat(), 0),
                                          AttenuationPair.zero(1), u)
        rng = np.random.default_rng(103)
        pair = random_pair(rng, 2)
        f = random_band_limited(rng, 2, 3, boundary_power=2)
        general = [energy_identity_residual(CURVED, pair, grid_of(get_mesh(N), f, 64))
                   for N in (65, 129)]
    ok = scalar < 1e-3 and general[-1] < 1e-2 and general[1] <= general[0] and c.elapsed < 180
    acceptance(3, "energy identity", ok,
               f"flat scalar {scalar:.2e}, n=2 general {general[0]:.2e} -> {general[1]:.2e}; "
               f"{c.elapsed:.1f}s")
    assert ok


def test_c04_kernel_forward(acceptance):
    with Clock() as c:
        rep = probe_kernel_forward(CURVED, None, 10, 64, n=2, dt=1e-3, seed=104)
    worst = rep.metric("max_abs_transform")
    ok = rep.passed and worst < 1e-6 and c.elapsed < 60
    acceptance(4, "kernel forward", ok, f"max |I(Phi p + d_A p)| {worst:.2e}; {c.elapsed:.1f}s")
    assert ok


def test_c05_gauge_invariance(acceptance):
    with Clock() as c:
        rep = probe_gauge_determination(CURVED, None, None, 64, n_draws=10, n=2, dt=1e-3, seed=105)
    diff, sep = rep.metric("max_fan_difference"), rep.metric("control_separation")
    ok = diff < 1e-6 and sep > 1e-3 and c.elapsed < 120
    acceptance(5, "gauge invariance", ok,
               f"fan difference {diff:.2e}, Phi vs 2 Phi {sep:.2e}; {c.elapsed:.1f}s")
    assert ok


def test_c06_scalar_closed_forms(acceptance):
    lam = 0.5
    exact_exit = 4 * math.asin(0.25)  # chord through the centre on a circle of radius 2
    with Clock() as c:
        s = MagneticSystem(Surface.flat(), lam)
        exit_err = abs(exit_time(s, PhasePoint(0, 0, 0)) - exact_exit)
        higgs = AttenuationPair.higgs([[sp.I * 2]])
        ft = transport_fan(s, higgs, boundary_fan(32))
        I_err = float(np.abs(ft.integrate(SMFunction(["1"]))[:, 0]
                             - constant_scalar_oracle(2.0, ft.tau)).max())
        errs, exits = [], []
        e = [BoundaryPoint(0.3, 0.2)]
        for dt in (0.04, 0.02, 0.01):
            one = transport_fan(s, AttenuationPair.higgs([[sp.I * 3]]), e, dt)
            errs.append(abs(one.integrate(SMFunction(["1"]))[0, 0]
                            - constant_scalar_oracle(3.0, one.tau[0])))
            exits.append(abs(exit_time(s, PhasePoint(0, 0, 0), 2 * dt) - exact_exit))
        order = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
        exit_order = [math.log2(a / b) for a, b in zip(exits, exits[1:])]
    ok = (exit_err < 1e-7 and I_err < 1e-7 and min(order) > 3.5 and min(exit_order) > 3.5
          and c.elapsed < 30)
    acceptance(6, "scalar closed forms", ok,
               f"exit {exit_err:.1e}, I {I_err:.1e}, observed orders "
               f"{min(order):.2f} (I) {min(exit_order):.2f} (exit); {c.elapsed:.1f}s")
    assert ok


def test_c07_tensor_tomography(acceptance):
    s = MagneticSystem(Surface.flat(), 0.3)
    with Clock() as c:
        reps = [probe_tensor_tomography(s, k, 3, 64, dt=1e-3, seed=107 + k) for k in (1, 2, 3)]
        deg = probe_degree_reduction(s, m=3, dt=1e-3, seed=110)
    pot = max(r.metric("max_potential_transform") for r in reps)
    ctrl = min(r.metric("min_control_transform") for r in reps)
    frac = deg.metric("high_mode_fraction")
    ok = pot < 1e-6 and ctrl > 1e-3 and frac < 1e-4 and c.elapsed < 120
    acceptance(7, "tensor tomography", ok,
               f"potentials {pot:.2e}, controls {ctrl:.2e}, mass outside |k|<=2 {frac:.2e}; "
               f"{c.elapsed:.1f}s")
    assert ok


def test_c08_riccati(acceptance):
    worst = 0.0
    with Clock() as c:
        for lam in (0.0, 0.3, 0.5):
            s = MagneticSystem(Surface.flat(), lam)
            worst = max([worst] + [r.residual for r in solve_riccati_fan(s, boundary_fan(32))])
        # closed forms: u = c/(ct + 1) for lam = 0, z'/z with z = (c/lam) sin + cos otherwise
        closed = 0.0
        for lam in (0.0, 0.5):
            s = MagneticSystem(Surface.flat(), lam)
            tr = integrate_geodesic(s, entry_state(BoundaryPoint(0.3, 0.2)))
            r = solve_riccati(s, tr)
            t, k = tr.t, r.c
            if lam == 0:
                exact = k / (k * t + 1)
            else:
                exact = ((k * np.cos(lam * t) - lam * np.sin(lam * t))
                         / ((k / lam) * np.sin(lam * t) + np.cos(lam * t)))
            closed = max(closed, float(np.abs(r.u - exact).max()))
    ok = worst < 1e-5 and closed < 1e-6 and c.elapsed < 60
    acceptance(8, "Riccati equation", ok,
               f"fan residual {worst:.2e}, closed forms {closed:.2e}; {c.elapsed:.1f}s")
    assert ok


INTFACTOR_CASES = ["cos(theta)", "I*(0.5 + 0.3*x*cos(theta) - 0.2*sin(theta))",
                   "1 + x*sin(theta) - y*cos(theta)"]


def test_c09_integrating_factor(acceptance):
    worst, monotone, rows = 0.0, True, []
    m = get_mesh(65)
    with Clock() as c:
        for lam in (0.0, 0.3):
            s = MagneticSystem(Surface.flat(), lam)
            for att in INTFACTOR_CASES:
                ladder = intfactor_ladder(s, SMFunction([att]), m, ntheta=64)
                seq = [f.residual for _, f in ladder]
                worst = max(worst, dict((K, f.residual) for K, f in ladder)[16])
                monotone &= all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
                rows.append(seq)
    ok = worst < 1e-3 and monotone and c.elapsed < 300
    acceptance(9, "integrating factor", ok,
               f"worst K_max=16 residual {worst:.2e}, monotone {monotone}; {c.elapsed:.1f}s")
    assert ok, rows


def test_c10_nullspace(acceptance):
    with Clock() as c:
        reps = [probe_nullspace_svd(MagneticSystem(Surface.flat(), 0.3), None, 3, 128, dt=1e-3),
                probe_nullspace_svd(MagneticSystem(Surface.flat(), 0.3),
                                    AttenuationPair([["I*y"]], [["0"]], [["2*I*x"]]), 3, 128,
                                    dt=1e-3)]
    ratio = min(r.metric("ratio") for r in reps)
    collapse = max(r.metric("sigma_min_with_potential") for r in reps)
    ok = ratio > 1e-3 and collapse < 1e-8 and c.elapsed < 300
    acceptance(10, "null-space probe", ok,
               f"restricted sigma ratio {ratio:.2e}, with potential {collapse:.2e}; "
               f"{c.elapsed:.1f}s")
    assert ok
