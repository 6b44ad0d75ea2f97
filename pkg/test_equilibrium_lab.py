"""
Tests du laboratoire d'équilibre: richesse, condition HJB, borne J et tournoi
"""

import numpy as np
import pytest

from kylelab.services.affine import AffineStrategy
from kylelab.services.bridge import BridgeConfig
from kylelab.services.conditioning import GaussianDensityModel, build_nu, build_phi
from kylelab.services.equilibrium_lab import (
    StrategySpec, WealthEstimate, delta_sensitivity, expected_wealth, hjb_necessary_condition, joint_terminal_ks,
    martingale_orthogonality, optimality_tournament, terminal_condition_check, wealth_bound_check,
    wealth_decomposition
)
from kylelab.services.pricing_pde import JField, PDEConfig, build_J_martingale_case, solve_H_martingale
from kylelab.services.sde_core import simulate_controlled, simulate_reference
from kylelab.utils.exceptions import ConfigurationException, ValidationException
from kylelab.utils.grids import GridField


@pytest.fixture
def identity_H(unit_grid):
    """P_t = H(t, X_t) = X_t"""
    t = unit_grid.nodes
    x = np.linspace(-10.0, 10.0, 201)
    return GridField((t, x), np.tile(x, (len(t), 1)), method='linear')


@pytest.fixture
def pushed_paths(brownian_coeffs, unit_grid):
    """α ≡ 1: la demande reçoit une dérive unitaire"""
    return simulate_controlled(brownian_coeffs, lambda t, v, x: np.ones(np.shape(v)), unit_grid, seed=13,
                               n_paths=4000)


class TestWealthEstimate:
    """Moyenne et erreurs standard"""

    def test_from_samples(self):
        estimate = WealthEstimate.from_samples([1.0, 2.0, 3.0], 'H')
        assert estimate.mean == pytest.approx(2.0)
        assert estimate.se == pytest.approx(1.0 / np.sqrt(3.0))
        assert estimate.to_dict() == {'wealth': 2.0, 'se': pytest.approx(1.0 / np.sqrt(3.0)), 'n_paths': 3,
                                      'source': 'H'}

    def test_joint_se(self):
        first = WealthEstimate.from_samples([1.0, 2.0, 4.0], 'H')
        shifted = WealthEstimate.from_samples([2.0, 3.0, 5.0], 'H')
        assert first.joint_se(shifted) == pytest.approx(np.hypot(first.se, shifted.se))
        assert first.joint_se(shifted, paired=True) == pytest.approx(0.0)


class TestStrategySpec:
    """Concurrents du tournoi"""

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationException):
            StrategySpec('momentum')

    def test_affine_requires_coefficients(self):
        with pytest.raises(ConfigurationException):
            StrategySpec('affine')

    @pytest.mark.parametrize('spec, label', [
        (StrategySpec('scaled_bridge', factor=0.5), '0.5*bridge'),
        (StrategySpec('time_shifted_bridge', shift=0.1), 'bridge(t+0.1)'),
        (StrategySpec('bridge', n_atoms=8), 'degraded_bridge_8'),
        (StrategySpec('zero', name='idle'), 'idle'),
    ])
    def test_labels(self, spec, label):
        assert spec.label == label

    def test_controls(self, brownian_coeffs):
        zero = StrategySpec('zero').control(brownian_coeffs, None, 0.9)
        np.testing.assert_array_equal(zero(0.5, np.ones(4), np.zeros(4)), 0.0)
        strategy = AffineStrategy.zero()
        assert StrategySpec('affine', affine=strategy).control(brownian_coeffs, None, 0.9) is strategy


class TestWealth:
    """Richesse espérée de l'initié"""

    def test_zero_trading_earns_nothing(self, brownian_coeffs, unit_grid, identity_H):
        paths = simulate_controlled(brownian_coeffs, AffineStrategy.zero(), unit_grid, seed=3, n_paths=50)
        estimate = expected_wealth(paths, H=identity_H)
        assert estimate.mean == 0.0
        assert estimate.n_paths == 50

    def test_unit_flow(self, pushed_paths, identity_H):
        estimate = expected_wealth(pushed_paths, H=identity_H)
        assert estimate.source == 'H'
        assert abs(estimate.mean + 0.5) <= 4.0 * estimate.se

    def test_price_source_required(self, pushed_paths):
        with pytest.raises(ConfigurationException):
            expected_wealth(pushed_paths)

    def test_decomposition(self, pushed_paths, identity_H):
        report = wealth_decomposition(pushed_paths, H=identity_H)
        assert set(report['representations']) == {'stochastic_integral', 'inventory', 'running'}
        assert report['inventory_vs_running'] <= 1e-10
        assert report['max_gap'] <= 0.05

    def test_terminal_condition(self, brownian_coeffs, unit_grid, identity_H):
        paths = simulate_reference(brownian_coeffs, unit_grid, seed=4, n_paths=200)
        report = terminal_condition_check(paths, identity_H, brownian_coeffs)
        assert report['t'] == pytest.approx(1.0)
        assert report['mean_abs_P_minus_g'] == pytest.approx(0.0, abs=1e-12)
        assert report['n_paths'] == 200


class TestTerminalLawGate:
    """Porte d'admissibilité sur la loi jointe de (V, g(X))"""

    def test_independent_paths_fail_joint_gate(self, brownian_coeffs, unit_grid):
        paths = simulate_reference(brownian_coeffs, unit_grid, seed=3, n_paths=2000)
        report = joint_terminal_ks(paths, brownian_coeffs, brownian_coeffs.m_star)
        assert report['marginal_ks'] <= 0.05
        assert report['joint_ks'] >= 0.2
        assert report['n_used'] == 2000

    def test_orthogonality(self, brownian_coeffs, unit_grid):
        paths = simulate_reference(brownian_coeffs, unit_grid, seed=8, n_paths=2000)
        assert martingale_orthogonality(paths)['passed']
        with pytest.raises(ValidationException):
            martingale_orthogonality(simulate_reference(brownian_coeffs, unit_grid, seed=8, n_paths=1))


class TestVerification:
    """Condition HJB et borne par J"""

    @pytest.fixture
    def J(self, brownian_coeffs):
        H = solve_H_martingale(brownian_coeffs, PDEConfig(-6.0, 6.0, 0.1, 0.01))
        return H, build_J_martingale_case(H, brownian_coeffs, a=0.5)

    def test_hjb_condition(self, brownian_coeffs, J):
        H, field = J
        report = hjb_necessary_condition(None, H, brownian_coeffs, field)
        assert report['passed'], report
        assert report['terminal_identity'] <= 1e-10

    def test_wealth_bound(self, brownian_coeffs, unit_grid, identity_H, J):
        paths = simulate_reference(brownian_coeffs, unit_grid, seed=6, n_paths=300)
        estimate = expected_wealth(paths, H=identity_H)
        report = wealth_bound_check(paths, J[1], brownian_coeffs, estimate)
        assert report['bound_respected']
        assert report['upper_bound'] == pytest.approx(1.0, abs=0.2)
        assert abs(report['identity_gap']) <= 0.3

    def test_wealth_bound_requires_martingale_field(self, brownian_coeffs, unit_grid, identity_H):
        paths = simulate_reference(brownian_coeffs, unit_grid, seed=6, n_paths=5)
        general = JField(identity_H, np.zeros(3), None, None, 0.0, 0.0, kind='general')
        with pytest.raises(ValidationException):
            wealth_bound_check(paths, general, brownian_coeffs, expected_wealth(paths, H=identity_H))


class TestTournament:
    """Tournoi sous contrainte de loi terminale"""

    def test_non_admissible_competitor_is_excluded(self, brownian_coeffs, identity_H):
        density = GaussianDensityModel(brownian_coeffs)
        field = build_phi(density, build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=16))
        config = BridgeConfig(n_paths=500, n_steps=100, seed=0)
        report = optimality_tournament(brownian_coeffs, field, [StrategySpec('zero')], n_paths=500, seeds=[1],
                                       H=identity_H, bridge_config=config, ks_gate=0.05, n_workers=1)
        assert [row['strategy'] for row in report['strategies']] == ['bridge', 'zero']
        assert [row['strategy'] for row in report['excluded']] == ['zero']
        assert report['empty']
        assert report['passed']
        assert report['metadata']['seeds'] == [1]

    @pytest.mark.parametrize('n_workers', [1, 2])
    def test_bridge_not_worse_than_degraded_competitor(self, brownian_coeffs, identity_H, n_workers):
        density = GaussianDensityModel(brownian_coeffs)
        field = build_phi(density, build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=64))
        degraded = build_phi(density, build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=16))
        competitor = StrategySpec('bridge', phi_field=degraded, n_atoms=16)
        config = BridgeConfig(n_paths=2000, n_steps=100, seed=0)
        report = optimality_tournament(brownian_coeffs, field, [competitor], n_paths=2000, seeds=[1], H=identity_H,
                                       bridge_config=config, ks_gate=0.2, n_workers=n_workers)
        verdicts = {row['strategy']: row for row in report['verdicts']}
        assert list(verdicts) == ['degraded_bridge_16']
        assert verdicts['degraded_bridge_16']['bridge_not_worse']
        assert not report['empty']
        assert report['passed']


class TestDeltaSensitivity:
    """Richesse du pont à δ et δ/4"""

    def test_wealth_stable_when_delta_shrinks(self, brownian_coeffs, identity_H):
        density = GaussianDensityModel(brownian_coeffs)
        field = build_phi(density, build_nu(brownian_coeffs.m_star, brownian_coeffs, n_atoms=16))
        config = BridgeConfig(delta=4e-3, n_paths=1000, n_steps=100, seed=2)
        report = delta_sensitivity(brownian_coeffs, field, config, identity_H)
        assert [row['delta'] for row in report['rows']] == pytest.approx([4e-3, 1e-3])
        assert report['joint_se'] > 0.0
        assert abs(report['difference']) <= 4.0 * report['joint_se']
