"""
Tests de la structure affine: stratégies, champs A/B, compatibilité et Riccati
"""

import numpy as np
import pytest

from kylelab.services.affine import (
    ABFields, AffineStrategy, HFunction, affine_from_pricing, build_AB, case_check, compatibility_residual,
    linear_reference_model, riccati_solve
)
from kylelab.utils.exceptions import DomainException, ShapeException, SolverDivergedException, ValidationException
from kylelab.utils.grids import ProbeGrid, TimeGrid


@pytest.fixture
def small_probe():
    return ProbeGrid.rectangle((0.1, 0.9), (-2.0, 2.0), (-2.0, 2.0), n=5)


@pytest.fixture
def tan_model():
    """Forçage ε = -1: S(t) = tan(1.2 - t), résidu de compatibilité nul"""
    return linear_reference_model(f=0.0, g_fun=0.0, k=0.0, beta=1.0, S0=np.tan(1.2), T=1.0, forcing=-1.0)


class TestStrategies:
    """Stratégies affines u = u0 + u1 v"""

    def test_evaluation(self):
        strategy = AffineStrategy(lambda t, x: -2.0 * np.asarray(x), lambda t, x: 2.0 * np.ones(np.shape(x)))
        np.testing.assert_allclose(strategy(0.3, np.array([1.0, 2.0]), np.array([0.5, 0.5])), [1.0, 3.0])

    def test_scaled_and_zero(self):
        base = AffineStrategy(lambda t, x: np.asarray(x, dtype=float), lambda t, x: np.ones(np.shape(x)))
        half = base.scaled(0.5)
        assert half(0.0, 2.0, 1.0) == pytest.approx(1.5)
        assert half.name == '0.5*affine'
        assert AffineStrategy.zero()(0.0, np.ones(3), np.ones(3)).tolist() == [0.0, 0.0, 0.0]

    def test_from_pricing_rule(self):
        strategy = affine_from_pricing(lambda t, x: np.asarray(x, dtype=float), beta=2.0)
        assert strategy(0.5, 1.5, 1.0) == pytest.approx(1.0)

    def test_linear_growth(self, small_probe):
        strategy = affine_from_pricing(lambda t, x: np.asarray(x, dtype=float), beta=1.0)
        report = strategy.linear_growth(small_probe)
        assert report['passed']
        assert max(report['K']) <= 1.0 + 1e-12


class TestHFunction:
    """Fonction h(t, v) et dérivées"""

    def test_polynomial_derivatives(self):
        h = HFunction.polynomial(1.0, 2.0, 3.0)
        assert h(0.2, 1.0) == pytest.approx(6.0)
        assert h.dv(0.2, 1.0) == pytest.approx(8.0)
        assert h.dvv(0.2, 1.0) == pytest.approx(6.0)
        assert h.dt(0.2, 1.0) == pytest.approx(0.0, abs=1e-10)
        assert h.degree == 2

    def test_numerical_derivatives(self):
        h = HFunction(lambda t, v: np.sin(t) * np.asarray(v) ** 2)
        assert float(h.dt(0.3, 2.0)) == pytest.approx(4.0 * np.cos(0.3), rel=1e-8)
        assert float(h.dv(0.3, 2.0)) == pytest.approx(4.0 * np.sin(0.3), rel=1e-8)
        assert float(h.dvv(0.3, 2.0)) == pytest.approx(2.0 * np.sin(0.3), rel=1e-6)


class TestABFields:
    """Intégrales A et B le long de x"""

    def test_constant_ratio(self, brownian_coeffs):
        strategy = AffineStrategy(lambda t, x: np.ones(np.shape(x)), lambda t, x: 2.0 * np.ones(np.shape(x)))
        ab = ABFields(strategy, brownian_coeffs)
        assert float(ab.A(0.5, 2.0)) == pytest.approx(2.0)
        assert float(ab.B(0.5, -1.0)) == pytest.approx(-2.0)
        assert float(ab.A_xx(0.5, 0.3)) == pytest.approx(0.0, abs=1e-10)

    def test_tabulated(self, brownian_coeffs):
        strategy = AffineStrategy(lambda t, x: np.asarray(x, dtype=float), lambda t, x: np.zeros(np.shape(x)))
        ab = build_AB(strategy, brownian_coeffs, np.linspace(0.0, 1.0, 5), np.linspace(-1.0, 1.0, 9))
        np.testing.assert_allclose(ab.A_field.values[2], 0.5 * np.linspace(-1.0, 1.0, 9) ** 2, atol=1e-12)
        np.testing.assert_allclose(ab.B_field.values, 0.0)

    def test_odd_quadrature_rejected(self, brownian_coeffs):
        with pytest.raises(ValidationException):
            ABFields(AffineStrategy.zero(), brownian_coeffs, n_quad=7)

    def test_vanishing_rho_guarded(self, linear_model):
        ab = ABFields(linear_model.strategy, linear_model.coeffs)
        with pytest.raises(DomainException) as info:
            ab.A_x(0.0, 1.0)
        assert info.value.code == 'DIVISION_GUARD'


class TestRiccati:
    """Équation de Riccati du modèle linéaire"""

    def test_tanh_closed_form(self):
        grid = TimeGrid(0.0, 1.0, 1000)
        solution = riccati_solve(0.0, 1.0, 0.0, grid)
        assert solution.ok
        assert solution.blow_up_time is None
        assert np.max(np.abs(solution(grid.nodes) - np.tanh(grid.nodes))) <= 1e-8
        np.testing.assert_allclose(solution.derivative(grid.nodes), 1.0 - np.tanh(grid.nodes) ** 2, atol=1e-8)

    def test_blow_up_detected(self):
        solution = riccati_solve(2.0, 0.0, 1.0, TimeGrid(0.0, 2.0, 2000), s_max=10.0)
        assert not solution.ok
        assert solution.blow_up_time == pytest.approx(np.log(10.25 / 1.25) / 4.0, abs=2e-3)

    def test_negative_forcing_leaves_domain(self):
        solution = riccati_solve(0.0, 1.0, 0.0, TimeGrid(0.0, 1.0, 100), forcing=-1.0)
        assert not solution.ok
        assert solution.blow_up_time <= 0.02

    def test_negative_initial_value(self):
        with pytest.raises(ValidationException) as info:
            riccati_solve(0.0, 1.0, -0.1, TimeGrid(0.0, 1.0, 10))
        assert info.value.code == 'INVALID_ARGUMENT'

    def test_linear_model_diverges(self):
        with pytest.raises(SolverDivergedException):
            linear_reference_model(f=2.0, g_fun=0.0, k=0.0, beta=0.0, S0=1.0, T=6.0)


class TestCompatibility:
    """Système de compatibilité de la structure affine"""

    def test_tan_model_is_compatible(self, tan_model, small_probe):
        report = compatibility_residual(tan_model.strategy, tan_model.coeffs, tan_model.h, small_probe)
        assert report.max_residual <= 1e-6
        assert report.passed
        assert report.cubic_vanishes
        assert report.to_dict()['probe']['t'] == [0.1, 0.9, 5]

    def test_positive_forcing_residual(self, linear_model, small_probe):
        report = compatibility_residual(linear_model.strategy, linear_model.coeffs, linear_model.h, small_probe)
        tt, vv, xx = small_probe.mesh()
        np.testing.assert_allclose(report.residual, (vv - xx) ** 2 / np.tanh(tt) ** 2, rtol=1e-4, atol=1e-6)
        assert report.max_residual == pytest.approx(16.0 / np.tanh(0.1) ** 2, rel=1e-4)
        assert not report.passed

    def test_perturbed_riccati_is_not(self, small_probe):
        model = linear_reference_model(f=0.0, g_fun=0.0, k=0.0, beta=1.0, S0=0.0, T=1.0, s_scale=1.1)
        report = compatibility_residual(model.strategy, model.coeffs, model.h, small_probe)
        assert report.max_residual > 1e-2
        assert not report.passed

    def test_h_undefined_where_riccati_vanishes(self, linear_model):
        with pytest.raises(DomainException) as info:
            linear_model.h(0.0, np.array([0.5]))
        assert info.value.value == 0.0
        with pytest.raises(DomainException):
            linear_model.h.dv(np.array([0.0, 0.5]), np.array([0.5, 0.5]))
        assert float(linear_model.h(0.5, 1.0)) == pytest.approx(-0.5 / np.tanh(0.5), rel=1e-8)

    def test_linear_model_wiring(self, linear_model):
        assert linear_model.coeffs.name == 'linear'
        assert float(linear_model.S(0.5)) == pytest.approx(np.tanh(0.5), rel=1e-8)
        assert linear_model.coeffs.m_star.kind == 'gaussian'
        assert float(linear_model.coeffs.eval_rho(0.5, 0.0)) == pytest.approx(np.tanh(0.5), rel=1e-8)


class TestCases:
    """Systèmes réduits des cas particuliers"""

    def test_tan_model_matches_case_five(self, tan_model, small_probe):
        report = case_check(5, tan_model.strategy, tan_model.coeffs, tan_model.h, small_probe)
        assert report['degrees'] == {'b': 0, 'sigma': 0, 'h': 2}
        assert report['validated_on_degenerate_inputs_only']
        assert report['passed'], report['failures']

    def test_shape_mismatch(self, linear_model, small_probe):
        with pytest.raises(ShapeException):
            case_check(1, linear_model.strategy, linear_model.coeffs, linear_model.h, small_probe)

    def test_case_one_martingale(self, brownian_coeffs, small_probe):
        report = case_check(1, AffineStrategy.zero(), brownian_coeffs, HFunction.zero(), small_probe)
        assert report['passed']
        assert report['intercept_residual'] == pytest.approx(0.0, abs=1e-12)

    def test_case_one_rejects_linear_u1(self, brownian_coeffs, small_probe):
        strategy = AffineStrategy(lambda t, x: np.zeros(np.shape(x)), lambda t, x: np.ones(np.shape(x)))
        report = case_check(1, strategy, brownian_coeffs, HFunction.zero(), small_probe)
        assert not report['passed']

    def test_unknown_case(self, brownian_coeffs, small_probe):
        with pytest.raises(ValidationException):
            case_check(6, AffineStrategy.zero(), brownian_coeffs, HFunction.zero(), small_probe)
