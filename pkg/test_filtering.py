"""
Tests du filtrage: filtre particulaire, oracle de Kalman-Bucy et relations FBSDE
"""

import numpy as np
import pytest

from kylelab.services.affine import AffineStrategy
from kylelab.services.filtering import (
    compare_to_oracle, exponential_martingale_test, fbsde_relation_check, innovation_regression,
    kalman_bucy_oracle, particle_filter, run_filters, systematic_resample, tower_property_check
)
from kylelab.services.sde_core import simulate_controlled
from kylelab.utils.exceptions import ShapeException, ValidationException
from kylelab.utils.grids import GridField


@pytest.fixture
def observed(linear_model, unit_grid):
    """Trajectoires du modèle linéaire sous la stratégie u = β(v - x)"""
    return simulate_controlled(linear_model.coeffs, linear_model.strategy, unit_grid, seed=17, n_paths=300,
                               stage='filter')


def _oracles(linear_model, paths, count=None):
    count = paths.n_paths if count is None else count
    return [kalman_bucy_oracle(linear_model.coeffs, 1.0, 0.0, paths.Y[i], paths.X[i], paths.grid)
            for i in range(count)]


class TestResampling:
    """Rééchantillonnage systématique"""

    def test_point_mass_weights(self):
        idx = systematic_resample(np.array([0.0, 1.0, 0.0]), np.random.default_rng(0))
        np.testing.assert_array_equal(idx, [1, 1, 1])

    def test_uniform_weights_keep_particles(self):
        idx = systematic_resample(np.full(5, 0.2), np.random.default_rng(3))
        np.testing.assert_array_equal(idx, np.arange(5))


class TestParticleFilter:
    """Filtre particulaire bootstrap"""

    def test_zero_strategy_carries_no_information(self, brownian_coeffs, unit_grid):
        Y = np.cumsum(np.r_[0.0, np.full(unit_grid.n_steps, 0.1)])
        path = particle_filter(brownian_coeffs, AffineStrategy.zero(), Y, np.zeros_like(Y), unit_grid,
                               n_particles=2000, seed=1)
        np.testing.assert_allclose(path.Z, 0.0)
        assert abs(path.P[-1]) <= 4.0 * np.sqrt(1.0 / 2000)
        assert path.resampled.sum() == 0

    def test_matches_kalman_bucy(self, linear_model, observed):
        particle = run_filters(linear_model.coeffs, linear_model.strategy, observed, n_particles=4000, seed=5,
                               n_obs=3)
        report = compare_to_oracle(particle, _oracles(linear_model, observed, 3), rmse_tol=0.05, z_tol=0.1)
        assert report['n_paths'] == 3
        assert report['passed'], report

    def test_same_seed_same_filter(self, linear_model, observed):
        args = (linear_model.coeffs, linear_model.strategy, observed.Y[0], observed.X[0], observed.grid, 200)
        first = particle_filter(*args, seed=4)
        second = particle_filter(*args, seed=4)
        np.testing.assert_array_equal(first.P, second.P)
        assert list(first.to_frame().columns) == ['t', 'P', 'Z', 'ESS', 'resampled_flag']

    def test_invalid_inputs(self, brownian_coeffs, unit_grid):
        Y = np.zeros(unit_grid.n_steps + 1)
        with pytest.raises(ValidationException):
            particle_filter(brownian_coeffs, AffineStrategy.zero(), Y[:-1], Y[:-1], unit_grid, 10, seed=0)
        with pytest.raises(ValidationException) as info:
            particle_filter(brownian_coeffs, AffineStrategy.zero(), Y, Y, unit_grid, 1, seed=0)
        assert info.value.code == 'INVALID_ARGUMENT'


class TestKalmanBucy:
    """Oracle linéaire-gaussien"""

    def test_price_equals_factor(self, linear_model, observed):
        for oracle, X in zip(_oracles(linear_model, observed, 5), observed.X):
            np.testing.assert_allclose(oracle.P, X, atol=1e-6)

    def test_variance_is_tanh(self, linear_model, observed):
        oracle = _oracles(linear_model, observed, 1)[0]
        np.testing.assert_allclose(oracle.variance, np.tanh(oracle.times), atol=1e-7)
        np.testing.assert_allclose(oracle.Z, oracle.variance)

    def test_requires_linear_structure(self, drift_coeffs, unit_grid):
        Y = np.zeros(unit_grid.n_steps + 1)
        with pytest.raises(ShapeException):
            kalman_bucy_oracle(drift_coeffs, 1.0, 0.0, Y, Y, unit_grid)


class TestMartingales:
    """Martingale exponentielle, tour et relation P = H(t, X)"""

    def test_exponential_martingale(self, brownian_coeffs, unit_grid):
        strategy = lambda t, v, x: np.ones(np.shape(v))
        paths = simulate_controlled(brownian_coeffs, strategy, unit_grid, seed=2, n_paths=4000)
        report = exponential_martingale_test(paths, [0.25, 0.5, 1.0])
        assert report['passed']
        assert [row['t'] for row in report['checkpoints']] == pytest.approx([0.25, 0.5, 1.0])

    def test_fbsde_relation_on_linear_model(self, linear_model, observed):
        t_axis = observed.grid.nodes
        x_axis = np.linspace(-10.0, 10.0, 201)
        H = GridField((t_axis, x_axis), np.tile(x_axis, (len(t_axis), 1)), method='linear')
        report = fbsde_relation_check(H, linear_model.coeffs, _oracles(linear_model, observed, 10))
        assert report['passed']
        assert report['rmse_P_minus_H'] <= 1e-6
        assert report['relative_error_Z'] <= 1e-6
        assert report['measure'] == 'simulated'

    def test_tower_property(self, linear_model, observed):
        report = tower_property_check(_oracles(linear_model, observed), observed, [0.5, 1.0])
        assert report['passed']

    def test_price_increments_are_unpredictable(self, linear_model, observed):
        report = innovation_regression(_oracles(linear_model, observed), observed.Y)
        assert report['passed']
