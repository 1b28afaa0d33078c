import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from magtomo.expr import theta, x, y
from magtomo.fields import (
    AttenuationPair, SMFunction, apply_flow_symbolic, gauge_transform, make_kernel_element,
    random_gauge, random_pair, random_rim_vanishing,
)
from magtomo.flow import PhasePoint, entry_state, integrate_geodesic
from magtomo.geometry import BoundaryPoint, MagneticSystem, Surface, boundary_fan
from magtomo.transform import (
    BACKWARD, attenuated_transform, attenuated_transform_fan, backward_stages, constant_scalar_oracle,
    integrate_samples, matrix_exponential_path, scattering_data, scattering_data_for,
    trace_weights, transport_fan, transport_matrix, unattenuated_transform,
)

ONE = SMFunction(["1"])


def higgs(c):
    return AttenuationPair.higgs([[sp.I * c]])


def test_constant_oracle_formula():
    assert constant_scalar_oracle(0.0, 2.0) == 2.0
    assert constant_scalar_oracle(math.pi, 2.0) == pytest.approx(0.0, abs=1e-15)


@given(st.integers(0, 12), st.floats(0.05, 1.0))
def test_trace_weights_integrate_cubics(n_steps, frac):
    dt = 0.1
    h = frac * dt
    t = np.append(dt * np.arange(n_steps + 1), n_steps * dt + h)
    w = trace_weights(n_steps, dt, h)
    T = t[-1]
    # exact for cubics once there are enough nodes; short traces fall back to Lagrange rules
    for p in range(min(4, n_steps + 1)):
        assert w @ t**p == pytest.approx(T ** (p + 1) / (p + 1), rel=1e-12, abs=1e-14)


def test_integrate_samples_sine():
    t = np.append(np.linspace(0, 1.0, 101), 1.003)
    assert integrate_samples(t, np.sin(t)) == pytest.approx(1 - math.cos(1.003), abs=1e-9)


def test_zero_attenuation_gives_arclength(flat03):
    ft = transport_fan(flat03, AttenuationPair.zero(1), boundary_fan(16))
    np.testing.assert_allclose(ft.integrate(ONE)[:, 0], ft.tau, atol=1e-12)
    e = BoundaryPoint(0.4, 0.3)
    assert unattenuated_transform(flat03, ONE, e) == pytest.approx(
        transport_fan(flat03, None, [e]).tau[0], abs=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_scalar_higgs_closed_form(flat, lam):
    s = MagneticSystem(flat, lam)
    ft = transport_fan(s, higgs(2.0), boundary_fan(32))
    I = ft.integrate(ONE)[:, 0]
    np.testing.assert_allclose(I, constant_scalar_oracle(2.0, ft.tau), atol=1e-7)


def test_scalar_closed_form_converges_at_fourth_order(flat05):
    e = [BoundaryPoint(0.3, 0.2)]
    errs = []
    for dt in (0.04, 0.02, 0.01):
        ft = transport_fan(flat05, higgs(3.0), e, dt)
        errs.append(abs(ft.integrate(ONE)[0, 0] - constant_scalar_oracle(3.0, ft.tau[0])))
    assert errs[0] / errs[1] > 12 and errs[1] / errs[2] > 12


def test_straight_line_dx(euclid):
    # f = cos(theta): along a diameter theta is constant
    e = BoundaryPoint(math.pi, 0.0)  # enters at (-1, 0) heading along +x
    I = attenuated_transform(euclid, AttenuationPair.zero(1), SMFunction(["cos(theta)"]), e)
    assert I[0] == pytest.approx(2.0, abs=1e-10)


def test_fundamental_theorem_kills_potentials(flat03):
    u = SMFunction([(1 - x**2 - y**2) ** 2 * (1 + x * sp.cos(theta) + y * sp.sin(2 * theta))])
    f = apply_flow_symbolic(flat03, u)
    I = attenuated_transform_fan(flat03, None, f, boundary_fan(32))
    assert np.abs(I).max() < 1e-6


@pytest.mark.parametrize("n", [1, 2])
def test_kernel_elements_transform_to_zero(flat03, n):
    rng = np.random.default_rng(n)
    pair = random_pair(rng, n)
    f = make_kernel_element(random_rim_vanishing(rng, n), pair).sm_function(flat03.surface)
    I = attenuated_transform_fan(flat03, pair, f, boundary_fan(32))
    assert np.abs(I).max() < 1e-6


def test_transform_rejects_outgoing(euclid):
    with pytest.raises(ValueError):
        attenuated_transform_fan(euclid, None, ONE, [BoundaryPoint(0.0, 3.0)])


def test_transport_identity_without_attenuation(flat03):
    tr = integrate_geodesic(flat03, PhasePoint(0.1, 0.0, 1.0))
    sol = transport_matrix(flat03, AttenuationPair.zero(2), tr)
    np.testing.assert_allclose(sol.U, np.broadcast_to(np.eye(2), sol.U.shape), atol=1e-15)


def test_scalar_transport_is_exponential(flat03):
    tr = integrate_geodesic(flat03, PhasePoint(0.1, 0.0, 1.0))
    sol = transport_matrix(flat03, higgs(1.5), tr)
    np.testing.assert_allclose(sol.U[:, 0, 0], np.exp(-1.5j * tr.t), atol=1e-10)


def test_matrix_transport_exponential_and_unitary():
    s = MagneticSystem(Surface.flat(), 0.5)
    S = np.array([[1j, 1 + 0.5j], [-1 + 0.5j, -0.3j]])
    tr = integrate_geodesic(s, entry_state(BoundaryPoint(0.3, 0.2)))
    fwd = transport_matrix(s, AttenuationPair.higgs(sp.Matrix(S.tolist())), tr)
    np.testing.assert_allclose(fwd.U, matrix_exponential_path(-S, tr.t), atol=1e-8)
    assert fwd.unitarity_defect() < 1e-12
    assert fwd.ode_residual() < 1e-8
    bwd = transport_matrix(s, AttenuationPair.higgs(sp.Matrix(S.tolist())), tr, BACKWARD)
    np.testing.assert_allclose(bwd.U[0], np.linalg.inv(fwd.U[-1]), atol=1e-12)
    np.testing.assert_allclose(bwd.U[-1], np.eye(2), atol=1e-15)


def test_curved_transport_is_unitary():
    s = MagneticSystem(Surface.bump(0.2), "0.2 + 0.1*y")
    pair = random_pair(np.random.default_rng(4), 3)
    tr = integrate_geodesic(s, entry_state(BoundaryPoint(2.0, -0.5)))
    sol = transport_matrix(s, pair, tr)
    assert sol.unitarity_defect() < 1e-12
    assert sol.ode_residual() < 1e-7
    np.testing.assert_allclose(sol.inverse()[-1] @ sol.U[-1], np.eye(3), atol=1e-12)


def test_scattering_data_trivial_and_scalar(flat):
    euclid = MagneticSystem(flat, 0)
    sd0 = scattering_data(euclid, AttenuationPair.zero(2), 16)
    np.testing.assert_allclose(sd0.C, np.broadcast_to(np.eye(2), sd0.C.shape), atol=1e-15)
    sd = scattering_data(euclid, higgs(2.0), 16)
    np.testing.assert_allclose(sd.C[:, 0, 0], np.exp(2j * sd.tau), atol=1e-7)
    assert sd.unitarity_defect() < 1e-12
    with pytest.raises(ValueError):
        scattering_data(euclid, higgs(1.0), 0)


def test_scattering_data_matches_forward_transport(flat03):
    pair = random_pair(np.random.default_rng(8), 2)
    entries = boundary_fan(16)
    sd = scattering_data_for(flat03, pair, entries)
    ft = transport_fan(flat03, pair, entries)
    np.testing.assert_allclose(sd.C, ft.exit_W, atol=1e-10)


def test_gauge_invariance_of_scattering(flat03):
    rng = np.random.default_rng(12)
    pair = random_pair(rng, 2)
    entries = boundary_fan(16)
    a = scattering_data_for(flat03, pair, entries)
    b = scattering_data_for(flat03, gauge_transform(pair, random_gauge(rng, 2)), entries)
    assert a.sup_difference(b) < 1e-6
    c = scattering_data_for(flat03, AttenuationPair(pair.A_x, pair.A_y, 2 * pair.Phi), entries)
    assert a.sup_difference(c) > 1e-3


def test_shared_backward_stages_match_fresh_solve(flat03):
    entries = boundary_fan(9)
    stages = backward_stages(flat03, entries)
    for seed in (1, 2):
        pair = random_pair(np.random.default_rng(seed), 2)
        fresh = scattering_data_for(flat03, pair, entries)
        shared = scattering_data_for(flat03, pair, entries, stages=stages)
        np.testing.assert_array_equal(fresh.C, shared.C)
    assert stages.x.shape[1] == 4 and np.all(stages.steps <= 0)
