"""
Étapes du pipeline Kyle Lab

Chaque étape reçoit un RunContext, calcule ses diagnostics, écrit ses
artefacts et renvoie un rapport portant la clé 'passed'. Les objets partagés
(coefficients, φ, H, ...) sont calculés à la demande et mis en cache.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from flask import current_app
import numpy as np
import pandas as pd

from ..context import setting
from ..utils.exceptions import ConfigurationException, ImproperConditioningException
from ..utils.grids import TimeGrid, uniform_axis
from .affine import AffineStrategy, compatibility_residual
from .bridge import BridgeConfig, pinning_check, simulate_full_bridge, terminal_frame, terminal_law_check
from .conditioning import (
    GaussianDensityModel, build_nu, build_phi, check_proper, estimate_density_fd, likelihood_martingale_check,
    phi_pde_residual
)
from .equilibrium_lab import (
    StrategySpec, delta_sensitivity, expected_wealth, hjb_necessary_condition, joint_terminal_ks,
    martingale_orthogonality, optimality_tournament, terminal_condition_check, wealth_bound_check,
    wealth_decomposition, wealth_via_F
)
from .export_service import ExportService
from .filtering import (
    compare_to_oracle, exponential_martingale_test, fbsde_relation_check, kalman_bucy_oracle, run_filters,
    tower_property_check
)
from .pricing_pde import (
    PDEConfig, build_J_general, build_J_martingale_case, compatibility_b0, compatibility_general, integrated_J,
    solve_F, solve_H_general, solve_H_martingale, verification_pde_residual
)
from .sde_core import simulate_controlled, simulate_reference, validate_assumptions
from .validation_service import ScenarioConfig, ValidationService

STAGE_ORDER = ('validate', 'simulate', 'bridge', 'affine-check', 'filter', 'pde', 'equilibrium')
CHECKPOINT_FRACTIONS = (0.25, 0.5, 0.75)


class WarningCollector(logging.Handler):
    """Collecte les avertissements émis pendant une étape"""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


@dataclass
class StageOutcome:
    name: str
    exit_code: int
    passed: bool
    warnings: List[str] = field(default_factory=list)
    error: Optional[Exception] = None


class RunContext:
    """État partagé d'un run (scénario, exporteur et caches)"""

    def __init__(self, scenario: ScenarioConfig, exporter: ExportService, strict: bool = False,
                 validator: Optional[ValidationService] = None):
        self.scenario = scenario
        self.exporter = exporter
        self.strict = strict
        self.validator = validator or ValidationService()
        self._cache: Dict[str, object] = {}

    def _cached(self, key: str, factory: Callable):
        if key not in self._cache:
            self._cache[key] = factory()
        return self._cache[key]

    # -- Objets du scénario -------------------------------------------------

    @property
    def seed(self) -> int:
        return self.scenario.seed_value

    @property
    def model(self):
        return self._cached('model', lambda: self.validator.build(self.scenario))

    @property
    def coeffs(self):
        return self.model[0]

    @property
    def strategy(self) -> Optional[AffineStrategy]:
        return self.model[1]

    @property
    def probe(self):
        return self._cached('probe', lambda: self.validator.probe(self.scenario, self.coeffs))

    @property
    def time_grid(self) -> TimeGrid:
        return self.validator.time_grid(self.scenario)

    @property
    def martingale_case(self) -> bool:
        tt, vv, xx = self.probe.mesh()
        return bool(np.max(np.abs(self.coeffs.eval_b(tt, vv, xx))) <= 1e-14)

    def bridge_config(self, n_paths: Optional[int] = None) -> BridgeConfig:
        section = self.scenario.bridge
        overrides = {'delta': section.delta, 'n_paths': n_paths or section.n_paths, 'seed': self.seed,
                     'n_steps': section.n_steps, 'apply_truncation': section.apply_truncation}
        if section.truncation_levels:
            overrides['truncation_levels'] = tuple(section.truncation_levels)
        return BridgeConfig.from_settings(**overrides)

    # -- Conditionnement ----------------------------------------------------

    @property
    def density(self):
        return self._cached('density', self._build_density)

    def _build_density(self):
        backend = self.scenario.bridge.backend
        if backend == 'gaussian' or (backend == 'auto' and self.coeffs.linear is not None):
            return GaussianDensityModel(self.coeffs)
        coeffs, pde = self.coeffs, self.scenario.pde
        horizon = np.sqrt(coeffs.T)
        v_spread = pde.n_std * max(float(coeffs.eval_sigma(0.0, coeffs.v0, coeffs.x0)) * horizon, 1.0)
        x_spread = pde.n_std * max(float(coeffs.eval_rho(0.0, coeffs.x0)) * horizon, 1.0)
        return estimate_density_fd(coeffs, uniform_axis(coeffs.v0 - v_spread, coeffs.v0 + v_spread, pde.dv),
                                   uniform_axis(coeffs.x0 - x_spread, coeffs.x0 + x_spread, pde.dx),
                                   self.time_grid)

    @property
    def nu(self):
        return self._cached('nu', lambda: build_nu(self.coeffs.m_star, self.coeffs, self.scenario.bridge.n_atoms))

    @property
    def phi(self):
        return self._cached('phi', lambda: build_phi(self.density, self.nu))

    def degraded_phi(self, n_atoms: int):
        return self._cached(f'phi:{n_atoms}',
                            lambda: build_phi(self.density, build_nu(self.coeffs.m_star, self.coeffs, n_atoms)))

    # -- Tarification -------------------------------------------------------

    @property
    def pde_config(self) -> PDEConfig:
        pde = self.scenario.pde
        dv = pde.dv if (pde.solve_F and not self.martingale_case) else None
        return PDEConfig.for_scenario(self.coeffs, dx=pde.dx, dt=pde.dt, n_std=pde.n_std, dv=dv,
                                      scheme=pde.scheme, boundary=pde.boundary)

    @property
    def pricing(self) -> Dict:
        return self._cached('pricing', self._solve_pricing)

    def _solve_pricing(self) -> Dict:
        coeffs, cfg, probe = self.coeffs, self.pde_config, self.probe
        if self.martingale_case:
            H = solve_H_martingale(coeffs, cfg)
            b0 = compatibility_b0(coeffs, probe)
            a = coeffs.m_star.mean()
            J = build_J_martingale_case(H, coeffs, a, enforce=False)
            return {'case': 'martingale', 'H': H, 'F': None, 'J': J, 'compatibility': b0,
                    'j_bound': integrated_J(H, coeffs)}
        if self.strategy is None:
            raise ConfigurationException(
                "Champ H indisponible: b non nul et aucune stratégie affine dans le scénario", setting='pde')
        H = solve_H_general(coeffs, self.strategy, cfg)
        if cfg.dv is None:
            return {'case': 'general', 'H': H, 'F': None, 'J': None, 'compatibility': None, 'j_bound': None}
        F = solve_F(coeffs, self.strategy, cfg)
        compat = compatibility_general(coeffs, self.strategy, H, F, probe)
        J = build_J_general(H, F, coeffs, cfg, enforce=False)
        return {'case': 'general', 'H': H, 'F': F, 'J': J, 'compatibility': compat, 'j_bound': None}

    @property
    def H(self):
        return self.pricing['H']


# ---------------------------------------------------------------------------
# Étapes
# ---------------------------------------------------------------------------

def _checkpoints(times: np.ndarray) -> List[float]:
    return [float(times[-1] * f) for f in CHECKPOINT_FRACTIONS]


def stage_validate(ctx: RunContext) -> Dict:
    """Hypothèses de régularité sur la grille de sondage"""
    report = validate_assumptions(ctx.coeffs, ctx.probe)
    ctx.exporter.write_json('scenario.json', ctx.scenario.model_dump(mode='json'))
    payload = report.to_dict()
    payload['scenario'] = ctx.scenario.name
    ctx.exporter.write_json('assumptions.json', payload)
    return {'passed': report.passed}


def stage_simulate(ctx: RunContext) -> Dict:
    """Trajectoires de référence (ou sous la stratégie affine du scénario)"""
    section = ctx.scenario.simulate
    grid = ctx.time_grid
    if ctx.strategy is not None:
        paths = simulate_controlled(ctx.coeffs, ctx.strategy, grid, ctx.seed, section.n_paths, stage='paths')
    else:
        paths = simulate_reference(ctx.coeffs, grid, ctx.seed, section.n_paths, stage='paths')
    ctx.exporter.write_csv('paths.csv', paths.to_frame(max_paths=section.export_paths))

    report = {
        'n_paths': paths.n_paths,
        'controlled': ctx.strategy is not None,
        'terminal': {name: {'mean': float(paths.terminal(name).mean()), 'std': float(paths.terminal(name).std())}
                     for name in ('V', 'X', 'Y')},
        'truncated': int(paths.truncated.sum()),
    }
    passed = True
    if ctx.strategy is not None and paths.n_paths > 1:
        report['exponential_martingale'] = exponential_martingale_test(paths, _checkpoints(paths.times))
        passed = report['exponential_martingale']['passed']
    report['passed'] = passed
    ctx.exporter.write_json('simulate.json', report)
    return report


def stage_bridge(ctx: RunContext) -> Dict:
    """Conditionnement propre, pont complet, ancrage et loi terminale"""
    coeffs, section = ctx.coeffs, ctx.scenario.bridge
    try:
        proper = check_proper(ctx.density, ctx.nu, section.lam)
        phi_field = ctx.phi
    except ImproperConditioningException as e:
        ctx.exporter.write_json('bridge.json', {
            'passed': False,
            'improper_conditioning': {'code': e.code, 'message': e.message, 'atom': e.atom},
            'law': coeffs.m_star.to_dict(),
        })
        raise

    config = ctx.bridge_config()
    paths = simulate_full_bridge(coeffs, phi_field, config)
    pinning = pinning_check(paths, coeffs)
    min_paths = min(int(current_app.config['MIN_LAW_PATHS']), max(2, paths.n_paths // 2))
    law = terminal_law_check(paths, coeffs.m_star, ks_threshold=ValidationService.tolerance(section.ks_threshold),
                             min_paths=min_paths, T=coeffs.T)
    reference = simulate_reference(coeffs, config.grid(coeffs.T), ctx.seed, config.n_paths, stage='likelihood')
    report = {
        'proper': proper,
        'backend': ctx.density.backend,
        'n_atoms': ctx.nu.n_atoms,
        'pinning': pinning.to_dict(),
        'terminal_law': law,
        'phi_pde_residual': phi_pde_residual(phi_field, coeffs, ctx.probe, delta=section.delta),
        'likelihood_martingale': likelihood_martingale_check(phi_field, reference, _checkpoints(reference.times)),
    }
    report['passed'] = bool(proper['passed'] and pinning.passed and law['passed'])
    ctx.exporter.write_csv('bridge_terminal.csv', terminal_frame(paths, coeffs))
    ctx.exporter.write_csv('bridge_paths.csv', paths.to_frame(max_paths=ctx.scenario.simulate.export_paths))
    ctx.exporter.write_json('bridge.json', report)
    return report


def stage_affine_check(ctx: RunContext) -> Dict:
    """Résidu de compatibilité de la structure affine"""
    h = ctx.coeffs.metadata.get('h')
    if ctx.strategy is None or h is None:
        report = {'tested': False, 'reason': 'aucune stratégie affine câblée pour ce préréglage', 'passed': True}
    else:
        tolerance = ValidationService.tolerance(ctx.scenario.affine.tolerance)
        compat = compatibility_residual(ctx.strategy, ctx.coeffs, h, ctx.probe, tolerance=tolerance)
        report = {'tested': True, 'compatibility': compat.to_dict(),
                  'linear_growth': ctx.strategy.linear_growth(ctx.probe), 'passed': compat.passed}
    ctx.exporter.write_json('affine.json', report)
    return report


def _filter_strategy(ctx: RunContext):
    if ctx.strategy is not None:
        return ctx.strategy, None
    config = ctx.bridge_config(n_paths=ctx.scenario.filter.n_obs)
    control = StrategySpec('bridge').control(ctx.coeffs, ctx.phi, config.grid(ctx.coeffs.T).t_end)
    return control, config


def stage_filter(ctx: RunContext) -> Dict:
    """Filtre particulaire, oracle de Kalman-Bucy et relation P = H(t, X)"""
    from .bridge import simulate_half_bridge

    section, coeffs = ctx.scenario.filter, ctx.coeffs
    control, bridge_config = _filter_strategy(ctx)
    if bridge_config is None:
        paths = simulate_controlled(coeffs, control, ctx.time_grid, ctx.seed, section.n_obs, stage='filter')
    else:
        paths = simulate_half_bridge(coeffs, ctx.phi, bridge_config)
    filters = run_filters(coeffs, control, paths, section.n_particles, ctx.seed, section.n_obs)

    report = {'n_obs': len(filters), 'n_particles': section.n_particles,
              'strategy': 'affine' if bridge_config is None else 'bridge',
              'degeneracy_steps': [f.degeneracy_steps for f in filters]}
    checks = []
    beta = coeffs.metadata.get('beta')
    if bridge_config is None and coeffs.linear is not None and beta is not None:
        oracle = [kalman_bucy_oracle(coeffs, beta, coeffs.metadata.get('S0', 0.0), paths.Y[i], paths.X[i],
                                     paths.grid) for i in range(len(filters))]
        report['oracle'] = compare_to_oracle(filters, oracle, ValidationService.tolerance(section.rmse_tol),
                                             ValidationService.tolerance(section.z_tol))
        checks.append(report['oracle']['passed'])
    try:
        H = ctx.H
    except ConfigurationException:
        H = None
    if H is not None:
        report['fbsde_relation'] = fbsde_relation_check(H, coeffs, filters)
    if len(filters) > 1:
        report['tower_property'] = tower_property_check(filters, paths, _checkpoints(paths.times))
    report['passed'] = all(checks)

    frames = []
    for i, path in enumerate(filters):
        frame = path.to_frame()
        frame.insert(0, 'path', paths.path_offset + i)
        frames.append(frame)
    ctx.exporter.write_csv('filter.csv', pd.concat(frames, ignore_index=True))
    ctx.exporter.write_json('filter.json', report)
    return report


def _summary(report: Optional[Dict]) -> Optional[Dict]:
    if report is None:
        return None
    return {k: v for k, v in report.items() if not isinstance(v, np.ndarray)}


def stage_pde(ctx: RunContext) -> Dict:
    """H, F, conditions de compatibilité et fonction de vérification J"""
    pricing = ctx.pricing
    H, J = pricing['H'], pricing['J']
    report = {'case': pricing['case'], 'grid': {'n_t': len(H.axes[0]), 'n_x': len(H.axes[1])},
              'compatibility': _summary(pricing['compatibility']), 'j_bound': pricing['j_bound']}
    passed = pricing['compatibility'] is None or bool(pricing['compatibility']['passed'])
    if J is not None:
        report['J'] = {'kind': J.kind, 'a': J.a, 'x_ref': J.x_ref, 'f_dependence': J.f_dependence,
                       'gradient_identity': J.gradient_identity}
        report['verification'] = verification_pde_residual(J, ctx.coeffs)
    report['passed'] = passed
    ctx.exporter.write_csv('H.csv', H.to_frame('H'))
    if pricing['F'] is not None:
        ctx.exporter.write_csv('F_initial_slice.csv', pricing['F'].slice_at(0, 0).to_frame('F'))
    ctx.exporter.write_json('pde.json', report)
    return report


def _strategy_specs(ctx: RunContext) -> List[StrategySpec]:
    specs = []
    for item in ctx.scenario.strategies:
        extra = {}
        kind = item.kind
        if kind == 'degraded_bridge' or (kind == 'bridge' and item.n_atoms):
            n_atoms = int(setting('DEGRADED_ATOMS', item.n_atoms))
            kind, extra = 'bridge', {'phi_field': ctx.degraded_phi(n_atoms), 'n_atoms': n_atoms}
        if item.kind == 'affine':
            extra = {'affine': ctx.strategy}
        specs.append(StrategySpec(kind, factor=item.factor, shift=item.shift, name=item.name, **extra))
    return specs


def stage_equilibrium(ctx: RunContext) -> Dict:
    """Richesse du pont, identités de vérification et tournoi"""
    coeffs, section = ctx.coeffs, ctx.scenario.equilibrium
    pricing, phi_field = ctx.pricing, ctx.phi
    H, F, J = pricing['H'], pricing['F'], pricing['J']
    config = ctx.bridge_config(n_paths=section.n_paths)

    from .bridge import simulate_half_bridge

    paths = simulate_half_bridge(coeffs, phi_field, config)
    wealth = expected_wealth(paths, H=H)
    report = {
        'wealth': wealth.to_dict(),
        'decomposition': wealth_decomposition(paths, H=H),
        'terminal_condition': terminal_condition_check(paths, H, coeffs),
        'joint_ks': joint_terminal_ks(paths, coeffs, coeffs.m_star),
    }
    if F is not None:
        via_f = wealth_via_F(paths, F, H)
        report['wealth_via_F'] = via_f.to_dict()
        report['estimators_agree'] = abs(wealth.mean - via_f.mean) <= 3.0 * wealth.joint_se(via_f)
    if J is not None:
        report['hjb'] = hjb_necessary_condition(F, H, coeffs, J)
    if pricing['case'] == 'martingale':
        report['wealth_bound'] = wealth_bound_check(paths, J, coeffs, wealth)
        report['orthogonality'] = martingale_orthogonality(paths)

    seeds = [int(s) for s in section.seeds]
    tournament = optimality_tournament(coeffs, phi_field, _strategy_specs(ctx), section.n_paths, seeds, H,
                                       bridge_config=config, ks_gate=ValidationService.tolerance(section.ks_gate),
                                       j_bound=pricing['j_bound'])
    report['tournament'] = {k: v for k, v in tournament.items() if k != 'strategies'}
    if section.delta_sensitivity:
        report['delta_sensitivity'] = delta_sensitivity(coeffs, phi_field, config, H)
    report['passed'] = bool(tournament['passed'])
    ctx.exporter.write_csv('tournament.csv', pd.DataFrame(tournament['strategies']))
    ctx.exporter.write_json('equilibrium.json', report)
    return report


STAGES = {
    'validate': stage_validate,
    'simulate': stage_simulate,
    'bridge': stage_bridge,
    'affine-check': stage_affine_check,
    'filter': stage_filter,
    'pde': stage_pde,
    'equilibrium': stage_equilibrium,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def run_stage(ctx: RunContext, name: str) -> StageOutcome:
    """
    Exécute une étape et traduit son issue en code de sortie

    Args:
        ctx: Contexte du run
        name: Nom de l'étape

    Returns:
        StageOutcome
    """
    from .. import handle_exception

    log = current_app.logger
    func = current_app.extensions['kylelab']['stages'].get(name)
    if func is None:
        raise ConfigurationException(f"Étape inconnue: {name}", setting='stage')
    collector = WarningCollector()
    log.addHandler(collector)
    log.info(f"🚀 Étape {name}")
    try:
        report = func(ctx)
        passed = bool(report.get('passed', True))
        if ctx.strict and collector.messages:
            log.error(f"❌ Étape {name}: {len(collector.messages)} avertissement(s) en mode strict")
            passed = False
        code = 0 if passed else 2
        outcome = StageOutcome(name, code, passed, list(collector.messages))
    except Exception as e:
        code = handle_exception(e)
        outcome = StageOutcome(name, code, False, list(collector.messages), e)
    finally:
        log.removeHandler(collector)
    ctx.exporter.manifest.record_stage(name, outcome.passed, outcome.exit_code, outcome.warnings)
    log.info(f"{'✅' if outcome.passed else '❌'} Étape {name} terminée (code {outcome.exit_code})")
    return outcome


def run_pipeline(ctx: RunContext, stages: Sequence[str]) -> List[StageOutcome]:
    """Exécute les étapes dans l'ordre des dépendances, arrêt à la première exception"""
    ordered = [name for name in STAGE_ORDER if name in stages]
    unknown = sorted(set(stages) - set(STAGE_ORDER))
    if unknown:
        raise ConfigurationException(f"Étape(s) inconnue(s): {', '.join(unknown)}", setting='stage')
    outcomes = []
    ctx.exporter.prepare()
    try:
        for name in ordered:
            outcome = run_stage(ctx, name)
            outcomes.append(outcome)
            if outcome.error is not None:
                break
    finally:
        ctx.exporter.finalize()
    return outcomes


def exit_code(outcomes: Sequence[StageOutcome]) -> int:
    codes = [o.exit_code for o in outcomes]
    if 1 in codes:
        return 1
    return max(codes, default=0)


def build_context(config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None,
                  strict: bool = False) -> RunContext:
    """Lit le scénario, applique les surcharges et prépare l'exporteur"""
    validator = ValidationService()
    scenario = validator.load(config_path)
    if seed is not None:
        scenario = validator.parse({**scenario.model_dump(mode='json'), 'seed': str(seed)})
    exporter = ExportService(output_dir or scenario.output_dir, scenario.config_hash())
    return RunContext(scenario, exporter, strict=strict, validator=validator)
