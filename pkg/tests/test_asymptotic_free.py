import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from triscale.asymptotic_free import (FreeExpansion, NdofFreeExpansion, backbone_curvature, backbone_frequency,
                                      coupling_frequency_shift, evaluate_free_expansion,
                                      evaluate_free_expansion_ndof, free_cross_mode_coefficients,
                                      free_initial_state)
from triscale.model import (Eigenbasis, InternalResonanceError, ModalModel, OscillatorParams, chain_model,
                            modal_reduce, solve_generalized_eigen)

BASELINE = OscillatorParams(omega=1.0, c=1.0, d=1.0, epsilon=0.01)


# --- symbolic oracle: substitute the expansion into u'' + w^2 u + eps c u^2 + eps d u^3 ---

_th, _eps, _a, _w, _c, _d = sp.symbols("theta epsilon a omega c d", positive=True)


def _project(expr, harmonic):
    return sp.simplify(sp.integrate(expr * sp.cos(harmonic * _th), (_th, 0, 2 * sp.pi)) / sp.pi)


def test_symbolic_first_order_residual_vanishes():
    nu1 = 3 * _d * _a**2 / (8 * _w)
    u1 = -_c * _a**2 / (2 * _w**2) + _c * _a**2 / (6 * _w**2) * sp.cos(2 * _th) \
        + _d * _a**3 / (32 * _w**2) * sp.cos(3 * _th)
    nu = _w + _eps * nu1
    u = _a * sp.cos(_th) + _eps * u1
    residual = nu**2 * sp.diff(u, _th, 2) + _w**2 * u + _eps * _c * u**2 + _eps * _d * u**3
    first = sp.expand(residual).coeff(_eps, 1)
    # the residual is a cosine polynomial of degree 3, so its projections decide it
    assert all(_project(first, k) == 0 for k in range(4))


def test_symbolic_second_order_frequency_removes_the_secular_term():
    nu1 = 3 * _d * _a**2 / (8 * _w)
    nu2 = -5 * _c**2 * _a**2 / (12 * _w**3) - 15 * _d**2 * _a**4 / (256 * _w**3)
    u1 = -_c * _a**2 / (2 * _w**2) + _c * _a**2 / (6 * _w**2) * sp.cos(2 * _th) \
        + _d * _a**3 / (32 * _w**2) * sp.cos(3 * _th)
    nu = _w + _eps * nu1 + _eps**2 * nu2
    u = _a * sp.cos(_th) + _eps * u1
    residual = nu**2 * sp.diff(u, _th, 2) + _w**2 * u + _eps * _c * u**2 + _eps * _d * u**3
    second = sp.expand(residual).coeff(_eps, 2)
    # any cos(theta) content at this order would force secular growth of u2
    assert _project(second, 1) == 0


def test_backbone_matches_the_exact_arithmetic():
    expected = sp.Integer(1) + sp.Rational(1, 100) * sp.Rational(3, 8) \
        + sp.Rational(1, 10000) * (-sp.Rational(5, 12) - sp.Rational(15, 256))
    assert backbone_frequency(1.0, BASELINE) == pytest.approx(float(expected), rel=1e-15)
    assert backbone_frequency(1.0, BASELINE) == pytest.approx(1.0037024, abs=1e-7)


def test_backbone_linear_system_is_flat():
    p = OscillatorParams(omega=1.7, epsilon=0.05)
    assert np.all(backbone_frequency(np.linspace(0, 10, 11), p) == 1.7)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 5), st.floats(1e-4, 0.2))
def test_backbone_is_even_in_amplitude(a, c, d, w, eps):
    p = OscillatorParams(omega=w, c=c, d=d, epsilon=eps)
    for order in (1, 2):
        assert backbone_frequency(a, p, order) == backbone_frequency(-a, p, order)


def test_backbone_hardening_is_monotone_where_first_order_dominates():
    p = OscillatorParams(omega=1.0, c=0.0, d=1.0, epsilon=0.01)
    a = np.linspace(0, 10, 401)
    first = p.epsilon * 3 * p.d * a**2 / (8 * p.omega)
    second = p.epsilon**2 * 15 * p.d**2 * a**4 / (256 * p.omega**3)
    grid = a[first > second]
    assert grid.size > 100
    assert np.all(np.diff(backbone_frequency(grid, p)) > 0)


def test_backbone_curvature_matches_symbolic_derivative():
    expr = _w + _eps * 3 * _d * _a**2 / (8 * _w) \
        + _eps**2 * (-5 * _c**2 * _a**2 / (12 * _w**3) - 15 * _d**2 * _a**4 / (256 * _w**3))
    second = sp.lambdify((_a, _w, _c, _d, _eps), sp.diff(expr, _a, 2))
    for a, c in ((1.0, 1.0), (2.5, 6.0), (0.3, 0.0)):
        p = OscillatorParams(omega=1.2, c=c, d=0.7, epsilon=0.02)
        assert backbone_curvature(a, p) == pytest.approx(second(a, 1.2, c, 0.7, 0.02), rel=1e-13)


def test_convexity_changes_sign_with_the_quadratic_coefficient():
    assert backbone_curvature(1.0, BASELINE) > 0
    assert backbone_curvature(1.0, BASELINE.replace(c=30.0)) < 0


# --- 1-DOF expansion ---------------------------------------------------------------------

def test_initial_displacement_matches_the_closed_form():
    for a, c, d, w in ((1.0, 1.0, 1.0, 1.0), (2.0, -0.5, 3.0, 1.7)):
        p = OscillatorParams(omega=w, c=c, d=d, epsilon=0.01)
        eps = p.epsilon
        expected = eps * a + eps**2 * (-c * a**2 / (3 * w**2) + d * a**3 / (32 * w**2))
        assert evaluate_free_expansion(0.0, a, p) == pytest.approx(expected, rel=1e-14)
        assert free_initial_state(a, p)[1] == 0.0


def test_exact_start_begins_at_eps_a():
    assert evaluate_free_expansion(0.0, 1.3, BASELINE, exact_start=True) == pytest.approx(0.013, rel=1e-14)


def test_linear_expansion_is_a_cosine():
    p = OscillatorParams(omega=2.0, epsilon=0.02)
    t = np.linspace(0, 50, 101)
    assert np.array_equal(evaluate_free_expansion(t, 1.5, p), 0.02 * 1.5 * np.cos(2.0 * t))


def test_order_one_drops_the_bracket():
    t = np.linspace(0, 30, 61)
    nu1 = backbone_frequency(2.0, BASELINE, 1)
    assert np.allclose(evaluate_free_expansion(t, 2.0, BASELINE, order=1), 0.02 * np.cos(nu1 * t), atol=1e-17)


def test_velocity_is_the_time_derivative():
    ex = FreeExpansion.build(1.7, BASELINE)
    t, h = np.linspace(0.3, 40, 50), 1e-6
    numeric = (ex.displacement(t + h) - ex.displacement(t - h)) / (2 * h)
    assert np.allclose(ex.velocity(t), numeric, atol=1e-12)


def test_order_must_be_one_or_two():
    with pytest.raises(ValueError):
        backbone_frequency(1.0, BASELINE, 3)
    with pytest.raises(ValueError):
        FreeExpansion.build(1.0, BASELINE, 0)


# --- N degrees of freedom ----------------------------------------------------------------

def test_single_mass_reduces_to_the_scalar_expansion():
    model = ModalModel([[1.0]], [[1.0]], c=1.0, d=1.0, epsilon=0.01)
    basis = solve_generalized_eigen(model)
    red = modal_reduce(model, basis)
    t = np.linspace(0, 500, 1001)
    ndof = evaluate_free_expansion_ndof(t, 1.2, red, basis)[:, 0]
    assert np.max(np.abs(ndof - evaluate_free_expansion(t, 1.2, BASELINE))) < 1e-14
    assert coupling_frequency_shift(1.2, red) == 0.0


def test_spring_on_a_node_leaves_the_mode_linear():
    model = chain_model(2, c=1.0, d=1.0, p=2, epsilon=0.02)
    basis = solve_generalized_eigen(model)
    red = modal_reduce(model, basis, 1)
    assert np.max(np.abs(free_cross_mode_coefficients(1.0, red, True))) < 1e-15
    t = np.linspace(0, 100, 201)
    y = NdofFreeExpansion(1.0, red, basis).modal(t)
    w = basis.omegas[0]
    assert np.allclose(y[:, 0], 0.02 * np.cos(w * t), atol=1e-16)
    assert np.max(np.abs(y[:, 1])) < 1e-16


def test_cross_mode_coefficients_solve_the_modal_equations():
    # y_k'' + w_k^2 y_k = -dphi_k (c e^2 + d e^3) with e = dphi_1 a cos(theta), theta' = w_1
    th, a, w1, wk, ck, dk = sp.symbols("theta a w1 wk ck dk", real=True)
    const = -ck * a**2 / (2 * wk**2)
    fund = -3 * dk * a**3 / (4 * (wk**2 - w1**2))
    second = ck * a**2 / (2 * (4 * w1**2 - wk**2))
    third = dk * a**3 / (4 * (9 * w1**2 - wk**2))
    y = const + fund * sp.cos(th) + second * sp.cos(2 * th) + third * sp.cos(3 * th)
    # ck = c dphi_1^2 dphi_k and dk = d dphi_1^3 dphi_k absorb the projection
    residual = w1**2 * sp.diff(y, th, 2) + wk**2 * y + ck * (a * sp.cos(th))**2 + dk * (a * sp.cos(th))**3
    assert sp.simplify(sp.expand(sp.expand_trig(sp.expand(residual).rewrite(sp.exp)))) == 0

    model = chain_model(4, c=1.3, d=0.9, epsilon=0.01)
    basis = solve_generalized_eigen(model)
    red = modal_reduce(model, basis)
    coef = free_cross_mode_coefficients(0.8, red, include_fundamental=True)
    values = {a: 0.8, w1: red.omega}
    for k in red.others():
        values.update({wk: red.omegas[k], ck: red.cross_c[k], dk: red.cross_d[k]})
        expected = [float(e.subs(values)) for e in (const, fund, second, third)]
        assert np.allclose(coef[k], expected, rtol=1e-13, atol=1e-16)
    assert np.all(coef[0] == 0)
    plain = free_cross_mode_coefficients(0.8, red)
    assert np.all(plain[:, 1] == 0) and np.array_equal(plain[:, [0, 2, 3]], coef[:, [0, 2, 3]])


def _flip(basis: Eigenbasis, columns) -> Eigenbasis:
    phis = np.array(basis.phis)
    phis[:, list(columns)] *= -1
    return Eigenbasis(basis.omegas, phis)


@settings(max_examples=20, deadline=None)
@given(st.sets(st.integers(0, 3)), st.floats(0.2, 2.0), st.booleans(), st.booleans())
def test_reconstruction_ignores_mode_sign_conventions(columns, a1, include_fundamental, coupling):
    model = chain_model(4, c=1.0, d=1.0, epsilon=0.01)
    basis = solve_generalized_eigen(model)
    flipped = _flip(basis, columns)
    t = np.linspace(0, 200, 301)
    ref = NdofFreeExpansion(a1, modal_reduce(model, basis), basis, 2, include_fundamental, coupling)
    # a flipped driven mode describes the same motion with the opposite amplitude
    a_flip = -a1 if 0 in columns else a1
    alt = NdofFreeExpansion(a_flip, modal_reduce(model, flipped), flipped, 2, include_fundamental, coupling)
    assert np.allclose(alt.displacement(t), ref.displacement(t), rtol=0, atol=1e-16)


def test_refuses_internal_resonance():
    model = ModalModel(np.eye(2), np.diag([1.0, 4.0]), c=1.0, d=1.0)
    basis = solve_generalized_eigen(model)
    with pytest.raises(InternalResonanceError):
        evaluate_free_expansion_ndof(np.linspace(0, 1, 3), 1.0, modal_reduce(model, basis), basis)


def test_cross_modes_are_second_order_for_the_long_chain():
    model = chain_model(29, c=1.0, d=1.0, epsilon=0.01)
    basis = solve_generalized_eigen(model)
    red = modal_reduce(model, basis)
    a1 = 0.5 / abs(red.driven_delta)
    y = NdofFreeExpansion(a1, red, basis).modal(np.linspace(0, 100, 2001))
    cross = np.max(np.abs(y[:, 1:]))
    assert 0 < cross < model.epsilon**2 * 10 * a1**3
    assert math.isclose(np.max(np.abs(y[:, 0])), model.epsilon * a1, rel_tol=0.02)
