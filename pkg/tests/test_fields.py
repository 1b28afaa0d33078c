import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from magtomo.expr import ExpressionError, random_disk_points, theta, x, y
from magtomo.fields import (
    AttenuationPair, ConnectionCurvature, FieldValidationError, SMFunction, SymmetricTensor,
    apply_flow_symbolic, apply_X_symbolic, exp_gauge, gauge_transform, make_kernel_element,
    random_gauge, random_pair, random_rim_vanishing, random_tensor, symmetric_inner_derivative,
    tensor_to_sm_function,
)
from magtomo.geometry import MagneticSystem, Surface

RIM = 1 - x**2 - y**2
PTS = random_disk_points(np.random.default_rng(5), 40)


def close(a, b, tol=1e-10):
    f = sp.lambdify((x, y, theta), sp.Matrix(a) - sp.Matrix(b), "numpy")
    vals = [np.abs(np.asarray(f(px, py, t), dtype=complex)).max()
            for px, py in PTS for t in (0.0, 1.3, 4.0)]
    return max(vals) < tol


def test_expression_errors():
    with pytest.raises(ExpressionError):
        SMFunction(["x +* 2"])
    with pytest.raises(ExpressionError):
        AttenuationPair([["z"]], [["0"]], [["0"]])


def test_skew_validation():
    good = AttenuationPair([["I*x"]], [["0"]], [["2*I"]])
    assert good.validate() == 0.0
    bad = AttenuationPair([["x"]], [["0"]], [["0"]])
    with pytest.raises(FieldValidationError):
        bad.validate()


def test_rank_mismatch_rejected():
    with pytest.raises(FieldValidationError):
        AttenuationPair(sp.zeros(2, 2), sp.zeros(1, 1), sp.zeros(2, 2))


@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_random_pairs_are_skew(seed, n):
    pair = random_pair(np.random.default_rng(seed), n)
    assert pair.skew_defect() < 1e-12


def test_identity_gauge_is_trivial():
    pair = random_pair(np.random.default_rng(0), 2)
    g = gauge_transform(pair, sp.eye(2))
    for a, b in ((g.A_x, pair.A_x), (g.A_y, pair.A_y), (g.Phi, pair.Phi)):
        assert close(a, b)


def test_pure_gauge_connection():
    Q = exp_gauge(RIM**2, [[1j, 0.5], [-0.5, -1j]])
    g = gauge_transform(AttenuationPair.zero(2), Q)
    Qi = Q.H
    assert close(g.A_x, Qi * Q.diff(x))
    assert close(g.A_y, Qi * Q.diff(y))
    assert close(g.Phi, sp.zeros(2, 2))


def test_scalar_gauge_symbolic_oracle():
    # Q = e^{i rim^2}: Q^{-1} dQ = i d(rim^2), Phi unchanged
    Q = sp.Matrix([[sp.exp(sp.I * RIM**2)]])
    pair = AttenuationPair([["I*y"]], [["0"]], [["3*I"]])
    g = gauge_transform(pair, Q)
    assert close(g.A_x, sp.Matrix([[sp.I * y + sp.I * sp.diff(RIM**2, x)]]))
    assert close(g.A_y, sp.Matrix([[sp.I * sp.diff(RIM**2, y)]]))
    assert close(g.Phi, pair.Phi)


def test_gauge_must_be_identity_on_rim():
    with pytest.raises(FieldValidationError):
        gauge_transform(AttenuationPair.zero(1), sp.Matrix([[sp.exp(sp.I * x)]]))
    with pytest.raises(FieldValidationError):
        gauge_transform(AttenuationPair.zero(1), sp.Matrix([[2]]), require_boundary_identity=False)


def test_gauge_preserves_skewness():
    rng = np.random.default_rng(3)
    g = gauge_transform(random_pair(rng, 2), random_gauge(rng, 2))
    assert g.skew_defect() < 1e-10


def test_kernel_elements():
    zero = make_kernel_element(["0"], AttenuationPair.zero(1))
    assert zero.F == sp.zeros(1, 1) and zero.sigma_x == sp.zeros(1, 1)
    plain = make_kernel_element([RIM], AttenuationPair.zero(1))
    assert plain.F == sp.zeros(1, 1)
    assert sp.simplify(plain.sigma_x[0] + 2 * x) == 0 and sp.simplify(plain.sigma_y[0] + 2 * y) == 0
    pair = AttenuationPair([["0"]], [["I*x"]], [["I"]])
    ke = make_kernel_element([RIM], pair)
    assert sp.simplify(ke.F[0] - sp.I * RIM) == 0
    assert sp.simplify(ke.sigma_x[0] + 2 * x) == 0
    assert sp.simplify(ke.sigma_y[0] - (-2 * y + sp.I * x * RIM)) == 0


def test_kernel_element_requires_vanishing():
    with pytest.raises(FieldValidationError):
        make_kernel_element(["x"], AttenuationPair.zero(1))


def test_kernel_element_is_transport_derivative():
    # Phi p + d_A p (v) = (X + A + Phi) p for p independent of theta
    s = Surface.bump(0.2)
    rng = np.random.default_rng(9)
    pair = random_pair(rng, 2)
    p = random_rim_vanishing(rng, 2)
    f = make_kernel_element(p, pair).sm_function(s)
    Xp = apply_X_symbolic(s, SMFunction(list(p)))
    em = sp.exp(-s.phi)
    att = pair.A_x * em * sp.cos(theta) + pair.A_y * em * sp.sin(theta) + pair.Phi
    assert close(f.components, sp.Matrix(Xp.components) + att * p)


def test_star_connection_is_minus_V():
    s = Surface("0.1*x*y")
    pair = random_pair(np.random.default_rng(2), 2)
    A_on_sm = pair.sm_attenuation(s) - pair.Phi
    assert close(pair.star_connection(s), -A_on_sm.diff(theta))


def test_curvature_of_constant_abelian_connection():
    # A = (i/2)(-y dx + x dy): dA = i dx^dy, so *F = i on the flat disk
    pair = AttenuationPair([["-I*y/2"]], [["I*x/2"]], [["0"]])
    cc = ConnectionCurvature(Surface.flat(), pair)
    assert sp.simplify(cc.star_FA[0] - sp.I) == 0
    assert cc.evaluator(0.2, 0.1).shape == (3, 1, 1)


def test_curvature_commutator_term():
    # constant non-commuting A: F = [A_x, A_y]
    ax = sp.Matrix([[sp.I, 0], [0, -sp.I]])
    ay = sp.Matrix([[0, 1], [-1, 0]])
    cc = ConnectionCurvature(Surface.flat(), AttenuationPair(ax, ay, sp.zeros(2, 2)))
    assert cc.star_FA == ax * ay - ay * ax


def test_tensor_lifts():
    flat = Surface.flat()
    assert tensor_to_sm_function(SymmetricTensor(0, ("3",)), flat).components[0] == 3
    dx = tensor_to_sm_function(SymmetricTensor(1, ("1", "0")), flat)
    assert sp.simplify(dx.components[0] - sp.cos(theta)) == 0
    dxdx = tensor_to_sm_function(SymmetricTensor(2, ("1", "0", "0")), flat)
    c = dxdx.components[0]
    assert sp.simplify(c - (1 + sp.cos(2 * theta)) / 2) == 0
    modes = {k: sp.integrate(c * sp.exp(-sp.I * k * theta), (theta, 0, 2 * sp.pi)) / (2 * sp.pi)
             for k in range(-3, 4)}
    assert {k for k, v in modes.items() if sp.simplify(v) != 0} == {-2, 0, 2}


def test_tensor_component_count():
    with pytest.raises(ExpressionError):
        SymmetricTensor(2, ("1", "0"))


def test_symmetric_derivative_flat_cases():
    flat = Surface.flat()
    assert symmetric_inner_derivative(SymmetricTensor(0, ("5",)), flat).components == (0, 0)
    d = symmetric_inner_derivative(SymmetricTensor(0, ("x",)), flat)
    assert d.components == (1, 0)
    # h = x dy: d^s h = (dx dy + dy dx)/2, components (0, 1/2, 0)
    h = symmetric_inner_derivative(SymmetricTensor(1, ("0", "x")), flat)
    assert [sp.simplify(c) for c in h.components] == [0, sp.Rational(1, 2), 0]


@pytest.mark.parametrize("order", [0, 1, 2])
def test_X_of_lift_is_lift_of_symmetric_derivative(order):
    # the identity X(h lifted) = (d^s h) lifted, on a curved surface
    s = Surface("0.2*x**2 - 0.1*y")
    h = random_tensor(np.random.default_rng(order), order)
    lhs = apply_X_symbolic(s, tensor_to_sm_function(h, s))
    rhs = tensor_to_sm_function(symmetric_inner_derivative(h, s), s)
    assert close(lhs.components, rhs.components)


def test_flow_symbolic_adds_lambda_V():
    sysm = MagneticSystem(Surface.flat(), "0.3")
    f = apply_flow_symbolic(sysm, SMFunction([x * sp.cos(theta)]))
    assert sp.simplify(f.components[0] - (sp.cos(theta) ** 2 - 0.3 * x * sp.sin(theta))) == 0


def test_sm_function_arithmetic():
    f = SMFunction(["x", "y*cos(theta)"])
    g = (f + f).scale(0.5) - f
    assert np.abs(g(0.3, 0.2, 1.0)).max() == 0
    assert SMFunction.zero(3).n == 3
    assert f(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros((1, 5))).shape == (4, 5, 2)
