"""
Tests du conditionnement: densités de transition, mesure ν, champ φ et diagnostics
"""

import numpy as np
import pytest
from scipy import stats

from kylelab.services.conditioning import (
    GaussianDensityModel, NullPhiField, PhiField, _log_gradient, build_nu, build_phi, check_proper,
    estimate_density_fd, estimate_density_kde, gaussian_density, likelihood_martingale_check, phi, phi_pde_residual,
    representation_check, theta, transition_moments
)
from kylelab.services.bridge import BridgeConfig, simulate_full_bridge
from kylelab.services.presets import brownian, ornstein_uhlenbeck
from kylelab.services.sde_core import TerminalLaw, simulate_reference
from kylelab.utils.exceptions import ImproperConditioningException, ValidationException
from kylelab.utils.grids import ProbeGrid, TimeGrid


@pytest.fixture
def gaussian_phi(brownian_coeffs):
    density = GaussianDensityModel(brownian_coeffs)
    nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=32)
    return build_phi(density, nu)


class TestTransitionDensity:
    """Densités gaussiennes en forme close"""

    def test_brownian_density_is_product_of_normals(self, brownian_coeffs):
        y = np.array([[0.0, 0.0], [0.5, -1.0], [2.0, 1.5]])
        expected = stats.norm.pdf(y[:, 0]) * stats.norm.pdf(y[:, 1])
        np.testing.assert_allclose(gaussian_density(brownian_coeffs, 0.0, [0.0, 0.0], 1.0, y), expected,
                                   rtol=1e-8)

    def test_time_homogeneous_shift(self, brownian_coeffs):
        z = np.array([0.3, -0.2])
        y = np.array([0.8, 0.1])
        value = gaussian_density(brownian_coeffs, 0.25, z, 0.75, y)
        expected = np.prod(stats.norm.pdf(y, loc=z, scale=np.sqrt(0.5)))
        assert float(value) == pytest.approx(expected, rel=1e-8)

    def test_ou_moments(self):
        coeffs = ornstein_uhlenbeck(kappa=1.0, sigma=1.0)
        phi_mat, psi, cov = transition_moments(coeffs.linear, 0.0, 1.0)
        assert phi_mat[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-8)
        assert cov[0, 0] == pytest.approx((1.0 - np.exp(-2.0)) / 2.0, rel=1e-8)
        assert cov[1, 1] == pytest.approx(1.0, rel=1e-8)
        np.testing.assert_allclose(psi, 0.0, atol=1e-14)

    def test_requires_forward_time(self, brownian_coeffs):
        with pytest.raises(ValidationException):
            transition_moments(brownian_coeffs.linear, 0.5, 0.5)

    def test_requires_linear_structure(self, drift_coeffs):
        with pytest.raises(ValidationException):
            GaussianDensityModel(drift_coeffs)


class TestFokkerPlanck:
    """Densité par différences finies"""

    def test_matches_closed_form(self, brownian_coeffs):
        axis = np.linspace(-5.0, 5.0, 101)
        density = estimate_density_fd(brownian_coeffs, axis, axis, TimeGrid(0.0, 1.0, 100))
        assert density.mass(1.0) == pytest.approx(1.0, abs=1e-2)
        y = np.array([[0.0, 0.0], [1.0, -0.5]])
        exact = gaussian_density(brownian_coeffs, 0.0, [0.0, 0.0], 1.0, y)
        np.testing.assert_allclose(density.evaluate(0.0, brownian_coeffs.xi0, 1.0, y), exact, atol=5e-3)

    def test_only_from_initial_state(self, brownian_coeffs):
        axis = np.linspace(-4.0, 4.0, 41)
        density = estimate_density_fd(brownian_coeffs, axis, axis, TimeGrid(0.0, 1.0, 50))
        with pytest.raises(ValidationException):
            density.evaluate(0.5, [0.0, 0.0], 1.0, np.zeros((1, 2)))


class TestNu:
    """Quantification de m* sur le graphe de g"""

    def test_quantile_midpoints(self, brownian_coeffs):
        nu = build_nu(TerminalLaw.gaussian(0.0, 1.0), brownian_coeffs, n_atoms=4)
        np.testing.assert_allclose(nu.v, stats.norm.ppf([0.125, 0.375, 0.625, 0.875]))
        np.testing.assert_allclose(nu.x, nu.v, atol=1e-12)
        np.testing.assert_allclose(nu.w, 0.25)
        assert nu.atoms.shape == (4, 2)

    def test_point_mass_single_atom(self, brownian_coeffs):
        nu = build_nu(TerminalLaw.point_mass(0.7), brownian_coeffs, n_atoms=64)
        assert nu.n_atoms == 1
        assert nu.x[0] == pytest.approx(0.7)

    def test_invalid_count(self, brownian_coeffs):
        with pytest.raises(ValidationException):
            build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=0)


class TestPhi:
    """Champ φ et dérive du pont"""

    def test_unit_at_initial_state(self, gaussian_phi, brownian_coeffs):
        assert float(gaussian_phi(0.0, brownian_coeffs.v0, brownian_coeffs.x0)) == pytest.approx(1.0, rel=1e-8)

    def test_gradient_matches_finite_difference(self, gaussian_phi):
        t, v, x, h = 0.4, 0.3, -0.6, 1e-5
        grad = gaussian_phi.grad_log_phi(t, v, x)
        dv = (gaussian_phi.log_phi(t, v + h, x) - gaussian_phi.log_phi(t, v - h, x)) / (2 * h)
        dx = (gaussian_phi.log_phi(t, v, x + h) - gaussian_phi.log_phi(t, v, x - h)) / (2 * h)
        assert grad[0] == pytest.approx(float(dv), abs=1e-6)
        assert grad[1] == pytest.approx(float(dx), abs=1e-6)

    def test_backward_equation_residual(self, gaussian_phi, brownian_coeffs, probe):
        report = phi_pde_residual(gaussian_phi, brownian_coeffs, probe)
        assert report['tested']
        assert report['max'] < 1e-3

    def test_theta_scales_gradient(self, gaussian_phi, brownian_coeffs):
        th1, th2 = theta(gaussian_phi, brownian_coeffs, 0.5, np.array([0.2]), np.array([-0.1]))
        grad = gaussian_phi.grad_log_phi(0.5, np.array([0.2]), np.array([-0.1]))
        np.testing.assert_allclose(th1, grad[..., 0])
        np.testing.assert_allclose(th2, grad[..., 1])

    def test_phi_undefined_at_horizon(self, brownian_coeffs):
        density = GaussianDensityModel(brownian_coeffs)
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=8)
        with pytest.raises(ValidationException):
            phi(density, nu, 1.0, 0.0, 0.0)

    def test_null_conditioning(self, brownian_coeffs, probe):
        field = NullPhiField(brownian_coeffs)
        np.testing.assert_array_equal(field.grad_log_phi(0.5, np.zeros(3), np.zeros(3)), 0.0)
        assert phi_pde_residual(field, brownian_coeffs, probe)['tested'] is False

    def test_likelihood_is_martingale(self, gaussian_phi, brownian_coeffs):
        grid = TimeGrid(0.0, 0.95, 95)
        reference = simulate_reference(brownian_coeffs, grid, seed=21, n_paths=4000)
        report = likelihood_martingale_check(gaussian_phi, reference, [0.25, 0.5, 0.75])
        assert report['passed']
        assert len(report['checkpoints']) == 3


class TestProperConditioning:
    """Diagnostic de conditionnement propre"""

    def test_gaussian_law_with_small_lambda(self, brownian_coeffs):
        density = GaussianDensityModel(brownian_coeffs)
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=16)
        report = check_proper(density, nu, lam=0.125)
        assert report['passed']
        assert report['ladder_available']
        assert np.isfinite(report['continuous_integral'])

    def test_heavy_lambda_diverges(self, brownian_coeffs):
        density = GaussianDensityModel(brownian_coeffs)
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=16)
        report = check_proper(density, nu, lam=1.0)
        assert not report['passed']
        assert report['continuous_integral'] == float('inf')

    def test_far_atom_is_improper(self):
        coeffs = brownian(T=1.0, m_star=TerminalLaw.point_mass(40.0))
        density = GaussianDensityModel(coeffs)
        nu = build_nu(coeffs.m_star, coeffs)
        with pytest.raises(ImproperConditioningException) as info:
            check_proper(density, nu, lam=0.1)
        assert info.value.atom == 0

    def test_far_atom_rejected_by_phi(self):
        coeffs = brownian(T=1.0, m_star=TerminalLaw.point_mass(40.0))
        nu = build_nu(coeffs.m_star, coeffs)
        with pytest.raises(ImproperConditioningException):
            build_phi(GaussianDensityModel(coeffs), nu)

    def test_probe_outside_grid_field(self, brownian_coeffs):
        axis = np.linspace(-4.0, 4.0, 41)
        density = estimate_density_fd(brownian_coeffs, axis, axis, TimeGrid(0.0, 1.0, 50))
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=8)
        field = build_phi(density, nu)
        far = ProbeGrid.rectangle((0.2, 0.8), (10.0, 12.0), (10.0, 12.0), n=3)
        with pytest.raises(ValidationException):
            phi_pde_residual(field, brownian_coeffs, far)


class TestKernelDensity:
    """Estimateur à noyau sur trajectoires de référence"""

    @pytest.fixture
    def kde(self, brownian_coeffs):
        return estimate_density_kde(brownian_coeffs, TimeGrid(0.0, 1.0, 50), seed=3, n_paths=4000,
                                    store_times=[0.49, 1.0])

    def test_snaps_to_grid_nodes(self, kde):
        np.testing.assert_allclose(kde.times, [0.5, 1.0])
        assert kde.backend == 'kernel_mc'

    def test_close_to_closed_form(self, kde, brownian_coeffs):
        y = np.array([[0.0, 0.0], [0.5, -0.5]])
        exact = gaussian_density(brownian_coeffs, 0.0, [0.0, 0.0], 1.0, y)
        np.testing.assert_allclose(kde.evaluate(0.0, brownian_coeffs.xi0, 1.0, y), exact, atol=2e-2)

    def test_only_from_initial_state(self, kde):
        with pytest.raises(ValidationException):
            kde.evaluate(0.5, [0.0, 0.0], 1.0, np.zeros((1, 2)))


class TestPhiSum:
    """Plancher relatif, cache et gradients tabulés"""

    def test_relative_floor_keeps_dominant_atom(self, brownian_coeffs):
        density = GaussianDensityModel(brownian_coeffs)
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=8)
        full = PhiField(brownian_coeffs, nu, density.kernel, floor_rel=1e-300)
        top = PhiField(brownian_coeffs, nu, density.kernel, floor_rel=1.0)
        t, v, x = 0.9, np.array([1.5, -1.5]), np.array([1.5, -1.5])
        a = full._terms(t, v, x)[0]
        np.testing.assert_allclose(top.log_phi(t, v, x), np.max(a, axis=-1), atol=1e-12)
        assert np.all(top.log_phi(t, v, x) < full.log_phi(t, v, x))

    def test_default_relative_floor_is_negligible(self, brownian_coeffs, config):
        density = GaussianDensityModel(brownian_coeffs)
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=32)
        field = build_phi(density, nu)
        assert field.floor_rel == config['DENSITY_FLOOR_REL']
        full = PhiField(brownian_coeffs, nu, density.kernel, floor_rel=1e-300)
        v = np.linspace(-2.0, 2.0, 9)
        np.testing.assert_allclose(field.log_phi(0.6, v, -v), full.log_phi(0.6, v, -v), atol=1e-12)

    def test_field_built_once_per_measure(self, brownian_coeffs, monkeypatch):
        from kylelab.services import conditioning

        density = GaussianDensityModel(brownian_coeffs)
        nu = build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=8)
        calls = []
        original = conditioning.build_phi
        monkeypatch.setattr(conditioning, 'build_phi', lambda *a, **k: calls.append(1) or original(*a, **k))
        first = phi(density, nu, 0.5, 0.1, 0.2)
        second = phi(density, nu, 0.5, 0.1, 0.2)
        assert len(calls) == 1
        assert float(first) == float(second)
        phi(density, build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=8), 0.5, 0.1, 0.2)
        assert len(calls) == 2

    def test_fourth_order_log_gradient(self):
        h = 0.2
        axis = np.arange(-3.0, 3.0 + h / 2, h)
        values = np.broadcast_to(np.sin(axis)[None, :, None], (2, len(axis), 3))
        grad = _log_gradient(values, h, axis=1)
        assert np.all(np.isfinite(grad))
        inner = np.abs(grad[:, 2:-2, :] - np.cos(axis)[None, 2:-2, None])
        assert inner.max() < 1e-4
        coarse = np.abs(np.gradient(values, h, axis=1)[:, 2:-2, :] - np.cos(axis)[None, 2:-2, None])
        assert inner.max() < coarse.max() / 10.0

    def test_grid_field_gradient_finite_on_edges(self, brownian_coeffs):
        axis = np.linspace(-4.0, 4.0, 41)
        density = estimate_density_fd(brownian_coeffs, axis, axis, TimeGrid(0.0, 1.0, 50))
        field = build_phi(density, build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=8))
        grad = field.grad_log_phi(0.5, np.array([-4.0, 0.0, 4.0]), np.array([-4.0, 0.0, 4.0]))
        assert np.all(np.isfinite(grad))


class TestRepresentation:
    """E^Q0[L_t f(ξ_t)] contre la moyenne directe sous le pont"""

    def test_weighted_reference_matches_bridge(self, gaussian_phi, brownian_coeffs):
        reference = simulate_reference(brownian_coeffs, TimeGrid(0.0, 0.95, 95), seed=21, n_paths=4000)
        bridged = simulate_full_bridge(brownian_coeffs, gaussian_phi,
                                       BridgeConfig(delta=0.05, n_paths=4000, n_steps=95, seed=5))
        report = representation_check(gaussian_phi, reference, bridged, 0.5)
        assert report['t'] == pytest.approx(0.5)
        assert report['joint_se'] > 0.0
        assert report['passed']
