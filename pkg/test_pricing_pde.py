"""
Tests des EDP de prix: règle H, champ F, compatibilité et fonction de vérification J
"""

from dataclasses import replace

import numpy as np
import pytest

from kylelab.services.affine import AffineStrategy
from kylelab.services.presets import brownian, g_map, ornstein_uhlenbeck
from kylelab.services.pricing_pde import (
    PDEConfig, build_J_general, build_J_martingale_case, compatibility_b0, compatibility_general, integrated_J,
    quadratic_order_study, solve_F, solve_H_general, solve_H_martingale, verification_pde_residual
)
from kylelab.services.sde_core import TerminalLaw
from kylelab.utils.exceptions import (
    CompatibilityViolatedException, ConfigurationException, SolverDivergedException, ValidationException
)
from kylelab.utils.grids import inner_mask


@pytest.fixture
def coarse():
    return PDEConfig(x_min=-3.0, x_max=3.0, dx=0.1, dt=0.01)


@pytest.fixture
def coarse_2d():
    return PDEConfig(x_min=-3.0, x_max=3.0, dx=0.1, dt=0.01, v_min=-3.0, v_max=3.0, dv=0.1)


def _inner(field):
    t, x = field.axes
    cols = inner_mask(x, 0.5)
    tt, xx = np.meshgrid(t, x[cols], indexing='ij')
    return tt, xx, field.values[:, cols]


class TestPDEConfig:
    """Domaine et schéma"""

    @pytest.mark.parametrize('kwargs', [
        dict(x_min=-1.0, x_max=1.0, dx=0.0, dt=0.1),
        dict(x_min=-1.0, x_max=1.0, dx=0.1, dt=-0.1),
        dict(x_min=1.0, x_max=1.0, dx=0.1, dt=0.1),
        dict(x_min=-1.0, x_max=1.0, dx=0.1, dt=0.1, v_min=1.0, v_max=0.0, dv=0.1),
    ])
    def test_invalid_domain(self, kwargs):
        with pytest.raises(ValidationException):
            PDEConfig(**kwargs)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigurationException):
            PDEConfig(-1.0, 1.0, 0.1, 0.1, scheme='leapfrog')

    def test_axes(self, coarse):
        assert coarse.x_axis[0] == -3.0 and coarse.x_axis[-1] == 3.0
        assert np.diff(coarse.x_axis).max() <= 0.1 + 1e-12
        assert len(coarse.t_axis(1.0)) == 101
        with pytest.raises(ValidationException):
            coarse.v_axis

    def test_scenario_domain_covers_law(self, brownian_coeffs):
        cfg = PDEConfig.for_scenario(brownian_coeffs, dx=0.1, dt=0.01, dv=0.1)
        assert cfg.x_min <= -6.0 + 1e-8 and cfg.x_max >= 6.0 - 1e-8
        assert cfg.v_min <= -6.0 and cfg.v_max >= 6.0


class TestPricingRule:
    """Règle de prix H"""

    def test_martingale_identity(self, brownian_coeffs, coarse):
        H = solve_H_martingale(brownian_coeffs, coarse)
        t, x = H.axes
        np.testing.assert_allclose(H.values, np.tile(x, (len(t), 1)), atol=1e-10)

    def test_drift_on_domain_not_multiple_of_step(self, brownian_coeffs):
        coeffs = replace(brownian_coeffs, mu=lambda t, x: np.ones_like(np.asarray(x, dtype=float)))
        cfg = PDEConfig(-3.0, 3.149, 0.1, 1e-3)
        assert np.diff(cfg.x_axis)[0] < 0.1
        H = solve_H_martingale(coeffs, cfg)
        t, x = H.axes
        tt, xx = np.meshgrid(t, x, indexing='ij')
        np.testing.assert_allclose(H.values, xx + (1.0 - tt), atol=1e-9)

    def test_martingale_cubic(self):
        coeffs = brownian(T=1.0, g=g_map('cubic'))
        H = solve_H_martingale(coeffs, PDEConfig(-6.0, 6.0, 0.05, 1e-3))
        t, x = H.axes
        cols = np.abs(x) <= 1.0
        tt, xx = np.meshgrid(t, x[cols], indexing='ij')
        exact = xx ** 3 + 3.0 * xx * (1.0 - tt) + xx
        np.testing.assert_allclose(H.values[:, cols], exact, atol=1e-3)

    def test_martingale_requires_zero_drift(self, coarse):
        with pytest.raises(ValidationException):
            solve_H_martingale(ornstein_uhlenbeck(kappa=1.0), coarse)

    def test_semilinear_closed_form(self, brownian_coeffs, coarse):
        coeffs = replace(brownian_coeffs, b=lambda t, v, x: 0.5 * np.asarray(v, dtype=float))
        H = solve_H_general(coeffs, AffineStrategy.zero(), coarse)
        tt, xx, values = _inner(H)
        np.testing.assert_allclose(values, xx * np.exp(-0.5 * (1.0 - tt)), atol=1e-5)

    def test_linear_model_fixed_point(self, linear_model, coarse):
        H = solve_H_general(linear_model.coeffs, linear_model.strategy, coarse)
        tt, xx, values = _inner(H)
        np.testing.assert_allclose(values, xx, atol=1e-8)

    def test_fixed_point_budget(self):
        coeffs = brownian(T=1.0, g=g_map('exp'))
        with pytest.raises(SolverDivergedException) as info:
            solve_H_general(coeffs, AffineStrategy.zero(), PDEConfig(-3.0, 3.0, 0.1, 0.01), tol=1e-300,
                            max_iter=1)
        assert info.value.time_slice is not None

    def test_quadratic_convergence(self):
        coeffs = brownian(T=1.0, g=g_map('exp'))
        study = quadratic_order_study(coeffs, PDEConfig(-10.0, 4.0, 0.2, 1e-3),
                                      lambda t, x: np.exp(x + 0.5 * (1.0 - t)))
        assert study['dx'] == pytest.approx([0.2, 0.1, 0.05])
        assert len(study['ratios']) == 2
        for ratio in study['ratios']:
            assert 3.0 <= ratio <= 5.0

    def test_study_records_realized_step(self):
        coeffs = brownian(T=1.0, g=g_map('exp'))
        study = quadratic_order_study(coeffs, PDEConfig(-10.0, 4.05, 0.2, 1e-2),
                                      lambda t, x: np.exp(x + 0.5 * (1.0 - t)), refinements=1)
        assert study['dx'][0] == pytest.approx(14.05 / 71)
        assert study['dx'][1] == pytest.approx(study['dx'][0] / 2.0)


class TestAuxiliaryField:
    """Champ F(t, v, x) = E[V_T | V_t = v, X_t = x]"""

    def test_martingale_value(self, brownian_coeffs, coarse_2d):
        F = solve_F(brownian_coeffs, AffineStrategy.zero(), coarse_2d)
        assert F.names == ('t', 'v', 'x')
        v = coarse_2d.v_axis
        np.testing.assert_allclose(F.values, np.broadcast_to(v[None, :, None], F.values.shape), atol=1e-10)


class TestCompatibility:
    """Conditions de compatibilité"""

    def test_brownian_is_compatible(self, brownian_coeffs, probe):
        report = compatibility_b0(brownian_coeffs, probe)
        assert report['passed']
        assert report['n_points'] == 7 * 7

    def test_drift_breaks_compatibility(self, drift_coeffs, probe):
        report = compatibility_b0(drift_coeffs, probe)
        assert not report['passed']
        assert report['max'] == pytest.approx(1.0, abs=1e-6)

    def test_general_system(self, brownian_coeffs, coarse_2d, probe):
        H = solve_H_martingale(brownian_coeffs, coarse_2d)
        F = solve_F(brownian_coeffs, AffineStrategy.zero(), coarse_2d)
        report = compatibility_general(brownian_coeffs, AffineStrategy.zero(), H, F, probe)
        assert report['passed']
        assert report['first']['max'] <= 1e-8


class TestVerificationFunction:
    """Fonction de vérification J"""

    def test_martingale_closed_form(self, brownian_coeffs, coarse):
        H = solve_H_martingale(brownian_coeffs, coarse)
        J = build_J_martingale_case(H, brownian_coeffs, a=0.5)
        assert J.x_ref == pytest.approx(0.5)
        assert J.f_dependence <= 1e-8
        np.testing.assert_allclose(J.f, 0.5, atol=1e-8)
        tt, xx, values = _inner(J.J)
        np.testing.assert_allclose(values, 0.5 * (xx - 0.5) ** 2 + 0.5 * (1.0 - tt), atol=1e-8)

    def test_martingale_residual(self, brownian_coeffs, coarse, probe):
        H = solve_H_martingale(brownian_coeffs, coarse)
        report = verification_pde_residual(build_J_martingale_case(H, brownian_coeffs, a=-1.0), brownian_coeffs,
                                           probe)
        assert report['passed']
        assert report['gradient_identity'] <= 1e-10

    def test_integrated_value(self, brownian_coeffs):
        H = solve_H_martingale(brownian_coeffs, PDEConfig(-6.0, 6.0, 0.1, 0.05))
        assert integrated_J(H, brownian_coeffs) == pytest.approx(1.0, rel=1e-5)
        point = TerminalLaw.point_mass(1.0)
        assert integrated_J(H, brownian_coeffs, point) == pytest.approx(1.0, abs=1e-8)

    def test_drift_makes_f_depend_on_x(self, drift_coeffs, coarse):
        H = solve_H_martingale(drift_coeffs, coarse)
        with pytest.raises(CompatibilityViolatedException) as info:
            build_J_martingale_case(H, drift_coeffs, a=0.5)
        assert info.value.residual > 1e-3
        relaxed = build_J_martingale_case(H, drift_coeffs, a=0.5, enforce=False)
        assert relaxed.f_dependence > 1e-3

    def test_general_case(self, brownian_coeffs, coarse_2d, probe):
        H = solve_H_martingale(brownian_coeffs, coarse_2d)
        F = solve_F(brownian_coeffs, AffineStrategy.zero(), coarse_2d)
        J = build_J_general(H, F, brownian_coeffs, coarse_2d)
        assert J.kind == 'general'
        assert J.f_dependence <= 1e-6
        t = J.G.axes[0]
        np.testing.assert_allclose(J.G.values[:, 30], 1.0 - t, atol=1e-8)
        report = verification_pde_residual(J, brownian_coeffs, probe)
        assert report['passed'], report
