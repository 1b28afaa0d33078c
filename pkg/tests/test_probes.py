import json

import numpy as np
import pytest
import sympy as sp

from magtomo.expr import theta, x, y
from magtomo.fields import AttenuationPair, SMFunction
from magtomo.geometry import MagneticSystem, Surface
from magtomo.probes import (
    ConfigError, ProbeReport, constant_basis_singular_value, interior_phase_points,
    nullspace_setup, probe_degree_reduction, probe_gauge_determination, probe_kernel_forward,
    probe_nullspace_svd, probe_tensor_tomography, recover_from_transport,
)

DT = 5e-3


def test_report_serialises():
    rep = ProbeReport("kernel", [("a", 1.0)], True, "abc", 3)
    d = rep.to_dict()
    assert d["pass"] is True and d["metrics"] == [["a", 1.0]]
    assert json.loads(json.dumps(d)) == d
    assert rep.metric("a") == 1.0
    with pytest.raises(KeyError):
        rep.metric("b")


def test_kernel_probe_trivial_and_random(flat03):
    zero = probe_kernel_forward(flat03, AttenuationPair.zero(1), 2, 8, dt=DT, zero_p=True)
    assert zero.metric("max_abs_transform") == 0 and zero.passed
    rep = probe_kernel_forward(flat03, None, 2, 12, n=2, dt=DT, seed=1)
    assert rep.passed, rep.metrics


def test_kernel_probe_is_reproducible(flat03):
    a = probe_kernel_forward(flat03, None, 1, 8, dt=DT, seed=5)
    b = probe_kernel_forward(flat03, None, 1, 8, dt=DT, seed=5)
    assert a.to_dict() == b.to_dict()


def test_gauge_probe_detects_higgs_doubling(flat03):
    rep = probe_gauge_determination(flat03, None, fan_size=9, n=2, dt=DT, seed=2)
    assert rep.metric("max_fan_difference") < 1e-6
    assert rep.metric("control_separation") > 1e-3
    assert rep.passed


def test_tensor_probe(flat03):
    rep = probe_tensor_tomography(flat03, 2, 2, 12, dt=DT, seed=3)
    assert rep.passed, rep.metrics
    with pytest.raises(ConfigError):
        probe_tensor_tomography(flat03, 5)


def test_tensor_probe_order_zero_has_no_potentials(euclid):
    rep = probe_tensor_tomography(euclid, 0, 1, 8, dt=DT)
    assert rep.metric("max_potential_transform") == 0 and rep.passed


def test_transport_recovery_inverts_flow(flat03):
    u = SMFunction([(1 - x**2 - y**2) * (x + y * sp.cos(theta))])
    from magtomo.fields import apply_flow_symbolic
    f = apply_flow_symbolic(flat03, u)
    px, py, th = interior_phase_points(4, 4)
    rec = recover_from_transport(flat03, f, px, py, th, DT)
    exact = u(px[:, None], py[:, None], th[None, :])[..., 0]
    assert np.abs(rec - exact).max() < 1e-7


def test_degree_reduction(flat03):
    rep = probe_degree_reduction(flat03, m=2, n_side=5, ntheta=8, dt=DT, seed=4)
    assert rep.passed and rep.metric("recovery_error") < 1e-7
    with pytest.raises(ConfigError):
        probe_degree_reduction(flat03, m=0)


def test_constant_singular_value_is_norm_of_tau(flat03):
    a, b = constant_basis_singular_value(flat03, 16, DT)
    assert a == pytest.approx(b, rel=1e-12)


def test_nullspace_potentials_lie_in_kernel(flat03):
    setup = nullspace_setup(flat03, AttenuationPair.zero(1), 1, 16, DT)
    assert setup.matrix.shape == (16, 9)
    assert setup.potentials.shape[1] == 1
    assert np.abs(setup.matrix @ setup.potentials).max() < 1e-8


def test_nullspace_probe_low_degree(flat03):
    rep = probe_nullspace_svd(flat03, degree=1, fan_size=32, dt=DT)
    assert rep.passed, rep.metrics
    assert rep.note == "empirical surrogate"


def test_nullspace_rejects_small_fan(flat03):
    with pytest.raises(ConfigError, match="enlarge the fan"):
        probe_nullspace_svd(flat03, degree=2, fan_size=8, dt=DT)


def test_nullspace_rejects_huge_basis():
    s = MagneticSystem(Surface.flat(), 0)
    with pytest.raises(ConfigError):
        nullspace_setup(s, AttenuationPair.zero(3), 6, 8)
