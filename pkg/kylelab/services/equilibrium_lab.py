"""
Service du laboratoire d'équilibre

Richesse espérée de l'initié, condition nécessaire HJB, borne par la
fonction J et tournoi entre la stratégie de pont et des concurrents soumis
à la contrainte de loi terminale.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

from flask import current_app
import numpy as np
from scipy import integrate

from ..context import setting, with_app_context
from ..utils.exceptions import ConfigurationException, ValidationException
from ..utils.grids import GridField, TimeGrid
from .bridge import BridgeConfig, simulate_half_bridge
from .pricing_pde import JField, verification_pde_residual
from .sde_core import CoefficientSet, PathBundle, TerminalLaw, simulate_controlled

STRATEGY_KINDS = ('bridge', 'affine', 'scaled_bridge', 'time_shifted_bridge', 'zero')


@dataclass
class WealthEstimate:
    """Estimation Monte-Carlo de E[W_T] et intégrales par trajectoire"""

    mean: float
    se: float
    n_paths: int
    per_path: np.ndarray = field(repr=False)
    source: str = 'H'

    @classmethod
    def from_samples(cls, samples, source: str) -> 'WealthEstimate':
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(samples.mean()) if n else 0.0, se, int(n), samples, source)

    def joint_se(self, other: 'WealthEstimate', paired: bool = False) -> float:
        """Erreur standard de la différence (appariée si mêmes trajectoires)"""
        if paired and other.n_paths == self.n_paths:
            diff = self.per_path - other.per_path
            return float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
        return float(np.hypot(self.se, other.se))

    def to_dict(self) -> Dict:
        return {'wealth': self.mean, 'se': self.se, 'n_paths': self.n_paths, 'source': self.source}


@dataclass(frozen=True)
class StrategySpec:
    """
    Stratégie concurrente d'un tournoi

    Args:
        kind: 'bridge', 'affine', 'scaled_bridge', 'time_shifted_bridge' ou 'zero'
        factor: Facteur c de c·θ² (scaled_bridge)
        shift: Décalage s de θ²(t + s, ·) (time_shifted_bridge)
        affine: Stratégie affine u0 + u1 v
        phi_field: Champ φ propre à ce concurrent (φ dégradé par exemple)
        name: Libellé du rapport
    """

    kind: str
    factor: float = 1.0
    shift: float = 0.0
    affine: Optional[Callable] = None
    phi_field: Optional[object] = None
    name: Optional[str] = None
    n_atoms: Optional[int] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationException(f"Type de stratégie inconnu: {self.kind}", setting='strategies')
        if self.kind == 'affine' and self.affine is None:
            raise ConfigurationException("Une stratégie affine requiert (u0, u1)", setting='strategies')

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == 'scaled_bridge':
            return f'{self.factor:g}*bridge'
        if self.kind == 'time_shifted_bridge':
            return f'bridge(t+{self.shift:g})'
        if self.kind == 'bridge' and (self.phi_field is not None or self.n_atoms):
            return f'degraded_bridge_{self.n_atoms}' if self.n_atoms else 'degraded_bridge'
        return self.kind

    def control(self, coeffs: CoefficientSet, phi_field, t_max: float) -> Callable:
        """u(t, v, x) évaluable le long des trajectoires"""
        if self.kind == 'zero':
            return lambda t, v, x: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(x)))
        if self.kind == 'affine':
            return self.affine
        field_ = self.phi_field or phi_field
        factor = self.factor if self.kind == 'scaled_bridge' else 1.0
        shift = self.shift if self.kind == 'time_shifted_bridge' else 0.0

        def u(t, v, x):
            s = min(float(t) + shift, t_max)
            return factor * coeffs.eval_rho(s, x) * field_.grad_log_phi(s, v, x)[..., 1]

        return u


def _price_path(paths: PathBundle, H: Optional[GridField] = None, filters: Optional[Sequence] = None):
    if filters is not None:
        if len(filters) < paths.n_paths:
            raise ConfigurationException("Un filtre par trajectoire est requis", setting='filter')
        return np.stack([f.P for f in filters[:paths.n_paths]])
    if H is not None:
        times = np.broadcast_to(paths.times, paths.X.shape)
        return H(times, paths.X)
    raise ConfigurationException("Source de prix manquante (filtre ou champ H)", setting='price_source')


def expected_wealth(paths: PathBundle, H: Optional[GridField] = None, filters: Optional[Sequence] = None,
                    v_terminal: Optional[np.ndarray] = None) -> WealthEstimate:
    """
    E[∫₀^{T-δ} (V_T - P_t) α_t dt] par trapèzes

    Args:
        paths: Trajectoires portant α
        H: Champ H (P_t = H(t, X_t))
        filters: Filtres particulaires (P_t filtré), prioritaires sur H
        v_terminal: Valeur terminale (V en fin de grille par défaut)

    Returns:
        WealthEstimate
    """
    keep = ~paths.terminated
    P = _price_path(paths, H, filters)
    v_T = paths.terminal('V') if v_terminal is None else np.asarray(v_terminal, dtype=float)
    integrand = (v_T[:, None] - P) * paths.alpha
    if not np.any(paths.alpha):
        return WealthEstimate.from_samples(np.zeros(int(keep.sum())), 'filter' if filters else 'H')
    per_path = integrate.trapezoid(integrand, paths.times, axis=1)
    return WealthEstimate.from_samples(per_path[keep], 'filter' if filters else 'H')


def wealth_via_F(paths: PathBundle, F: GridField, H: GridField, strategy: Optional[Callable] = None) -> WealthEstimate:
    """E[∫ (F(s, V_s, X_s) - H(s, X_s)) u ds], la commande étant relue sur les trajectoires par défaut"""
    keep = ~paths.terminated
    times = np.broadcast_to(paths.times, paths.X.shape)
    coverage = F.coverage(times, paths.V, paths.X)
    if coverage > 0:
        current_app.logger.warning(f"⚠️ Trajectoires hors du domaine de F ({coverage:.2%} des points)")
    alpha = paths.alpha if strategy is None else np.asarray(strategy(times, paths.V, paths.X), dtype=float)
    if not np.any(alpha):
        return WealthEstimate.from_samples(np.zeros(int(keep.sum())), 'F')
    integrand = (F(times, paths.V, paths.X) - H(times, paths.X)) * alpha
    per_path = integrate.trapezoid(integrand, paths.times, axis=1)
    return WealthEstimate.from_samples(per_path[keep], 'F')


def wealth_decomposition(paths: PathBundle, H: Optional[GridField] = None,
                         filters: Optional[Sequence] = None) -> Dict:
    """
    Trois écritures de la richesse, avec ξ_t = ∫₀ᵗ α ds (sommes à gauche):
    E[(V_T - P_T) ξ_T + ∫ ξ dP], E[ξ_T V_T - ∫ α P dt] et E[∫ (V_T - P_t) α dt]
    """
    keep = ~paths.terminated
    P = _price_path(paths, H, filters)[keep]
    alpha = paths.alpha[keep]
    v_T = paths.terminal('V')[keep]
    dt = np.diff(paths.times)
    flow = alpha[:, :-1] * dt
    xi = np.concatenate([np.zeros((flow.shape[0], 1)), np.cumsum(flow, axis=1)], axis=1)

    stochastic = (v_T - P[:, -1]) * xi[:, -1] + np.sum(xi[:, :-1] * np.diff(P, axis=1), axis=1)
    inventory = xi[:, -1] * v_T - np.sum(flow * P[:, :-1], axis=1)
    running = np.sum((v_T[:, None] - P[:, :-1]) * flow, axis=1)

    estimates = {name: WealthEstimate.from_samples(s, name).to_dict()
                 for name, s in (('stochastic_integral', stochastic), ('inventory', inventory),
                                 ('running', running))}
    means = [e['wealth'] for e in estimates.values()]
    return {'representations': estimates, 'max_gap': float(max(means) - min(means)),
            'inventory_vs_running': float(np.max(np.abs(inventory - running))) if running.size else 0.0}


def hjb_necessary_condition(F: Optional[GridField], H: GridField, coeffs: CoefficientSet, J: JField,
                            tolerance: float = 1e-2) -> Dict:
    """
    Condition nécessaire ρ J_x + F - H = 0, identité terminale et reste parabolique de J

    Args:
        F: Champ F (None pour F = v, cas b ≡ 0)
        H: Champ H
        coeffs: Jeu de coefficients
        J: Fonction de vérification construite
        tolerance: Tolérance sur le reste parabolique

    Returns:
        Rapport de résidus
    """
    x = H.axes[1]
    if F is None:
        v = np.array([J.a]) if J.a is not None else x
        F_T = np.broadcast_to(v[:, None], (len(v), len(x)))
    else:
        v = F.axes[1]
        F_T = F.values[-1]
        x = F.axes[2]
    H_T = H(np.full(len(x), coeffs.T), x)
    terminal = float(np.max(np.abs(H_T[None, :] - F_T - (coeffs.eval_g(x)[None, :] - v[:, None]))))
    parabolic = verification_pde_residual(J, coeffs)

    report = {
        'gradient_residual': J.gradient_identity,
        'terminal_identity': terminal,
        'hjb_residual': parabolic['max'],
        'hjb_residual_l2': parabolic['l2'],
    }
    report['passed'] = J.gradient_identity <= 1e-8 and terminal <= 1e-10 and parabolic['max'] <= tolerance
    level = 'info' if report['passed'] else 'warning'
    getattr(current_app.logger, level)(
        f"{'✅' if report['passed'] else '⚠️'} Condition HJB: reste parabolique {parabolic['max']:.3e}")
    return report


def terminal_condition_check(paths: PathBundle, H: GridField, coeffs: CoefficientSet) -> Dict:
    """Écarts V - H(T-δ, X) et H(T-δ, X) - g(X) en fin de grille"""
    keep = ~paths.terminated
    t_end = paths.times[-1]
    X, V = paths.terminal('X')[keep], paths.terminal('V')[keep]
    price = H(np.full(X.shape, t_end), X)
    return {
        't': float(t_end),
        'mean_abs_V_minus_P': float(np.mean(np.abs(V - price))),
        'mean_abs_P_minus_g': float(np.mean(np.abs(price - coeffs.eval_g(X)))),
        'n_paths': int(keep.sum()),
    }


def joint_terminal_ks(paths: PathBundle, coeffs: CoefficientSet, m_star: TerminalLaw, n_grid: int = 64) -> Dict:
    """
    sup |P(V ≤ a, g(X) ≤ b) - F_m*(min(a, b))| sur une grille de quantiles de m*

    La statistique marginale KS de V est rapportée à côté.
    """
    keep = ~paths.terminated & ~paths.truncated
    V = paths.terminal('V')[keep]
    G = coeffs.eval_g(paths.terminal('X')[keep])
    if V.size == 0:
        return {'joint_ks': 1.0, 'marginal_ks': 1.0, 'n_used': 0}
    probs = (np.arange(n_grid) + 0.5) / n_grid
    q = np.unique(np.asarray(m_star.ppf(probs), dtype=float))
    below_v = (V[:, None] <= q[None, :]).astype(float)
    below_g = (G[:, None] <= q[None, :]).astype(float)
    joint = below_v.T @ below_g / V.size
    target = m_star.cdf(np.minimum(q[:, None], q[None, :]))
    marginal = np.max(np.abs(below_v.mean(axis=0) - m_star.cdf(q)))
    return {'joint_ks': float(np.max(np.abs(joint - target))), 'marginal_ks': float(marginal), 'n_used': int(V.size)}


def simulate_strategy(spec: StrategySpec, coeffs: CoefficientSet, phi_field, bridge_config: BridgeConfig,
                      seed: int) -> PathBundle:
    """Trajectoires sous P pour un concurrent (demi-pont pour la stratégie de pont)"""
    config = replace(bridge_config, seed=int(seed))
    grid = config.grid(coeffs.T)
    if spec.kind == 'bridge':
        return simulate_half_bridge(coeffs, spec.phi_field or phi_field, config, grid)
    control = spec.control(coeffs, phi_field, grid.t_end)
    return simulate_controlled(coeffs, control, grid, int(seed), int(config.n_paths), stage=f'tournament:{spec.label}')


def _leg(spec, coeffs, phi_field, bridge_config, seed, H, ks_gate):
    paths = simulate_strategy(spec, coeffs, phi_field, bridge_config, seed)
    wealth = expected_wealth(paths, H=H)
    gate = joint_terminal_ks(paths, coeffs, coeffs.m_star)
    return {'strategy': spec.label, 'kind': spec.kind, 'seed': int(seed), 'estimate': wealth,
            'ks_gate': gate['joint_ks'], 'marginal_ks': gate['marginal_ks'],
            'admissible': gate['joint_ks'] <= ks_gate}


def optimality_tournament(coeffs: CoefficientSet, phi_field, strategies: Sequence[StrategySpec], n_paths: int,
                          seeds: Sequence[int], H: GridField, bridge_config: Optional[BridgeConfig] = None,
                          ks_gate: Optional[float] = None, j_bound: Optional[float] = None,
                          n_workers: Optional[int] = None) -> Dict:
    """
    Compare la richesse de la stratégie de pont à celle des concurrents admissibles

    Args:
        coeffs: Jeu de coefficients
        phi_field: Champ φ de la stratégie de pont
        strategies: Concurrents (la stratégie 'bridge' de référence est ajoutée si absente)
        n_paths: Trajectoires par jambe
        seeds: Graines (une jambe par graine et par concurrent)
        H: Règle de prix (P_t = H(t, X_t))
        bridge_config: Paramètres de grille et de δ
        ks_gate: Seuil de la porte d'admissibilité
        j_bound: Borne ∫ J(0, x0; a) m*(da) si disponible

    Returns:
        Rapport du tournoi
    """
    gate = float(setting('KS_GATE', ks_gate))
    workers = max(1, int(setting('N_WORKERS', n_workers)))
    config = replace(bridge_config or BridgeConfig.from_settings(), n_paths=int(n_paths))
    specs = list(strategies)
    if not any(s.kind == 'bridge' and s.phi_field is None for s in specs):
        specs.insert(0, StrategySpec('bridge'))
    jobs = [(spec, seed) for spec in specs for seed in seeds]
    log = current_app.logger
    log.info(f"🏁 Tournoi: {len(specs)} stratégies × {len(seeds)} graine(s), {n_paths} trajectoires")

    run = lambda job: _leg(job[0], coeffs, phi_field, config, job[1], H, gate)
    if workers == 1:
        legs = [run(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            legs = list(pool.map(with_app_context(run), jobs))

    rows: Dict[str, Dict] = {}
    for leg in legs:
        row = rows.setdefault(leg['strategy'], {'strategy': leg['strategy'], 'kind': leg['kind'], 'legs': []})
        row['legs'].append(leg)
    for row in rows.values():
        samples = np.concatenate([leg['estimate'].per_path for leg in row['legs']])
        estimate = WealthEstimate.from_samples(samples, 'H')
        row.update({'estimate': estimate, 'wealth': estimate.mean, 'se': estimate.se,
                    'ks_gate': float(max(leg['ks_gate'] for leg in row['legs'])),
                    'marginal_ks': float(max(leg['marginal_ks'] for leg in row['legs']))})
        row['admissible'] = row['ks_gate'] <= gate

    reference = rows[StrategySpec('bridge').label]
    verdicts, excluded = [], []
    for name, row in rows.items():
        if row is reference:
            continue
        if not row['admissible']:
            excluded.append({'strategy': name, 'ks': row['ks_gate']})
            continue
        joint = reference['estimate'].joint_se(row['estimate'])
        gap = reference['wealth'] - row['wealth']
        verdicts.append({'strategy': name, 'gap': gap, 'joint_se': joint,
                         'bridge_not_worse': gap >= -2.0 * joint, 'strictly_better': gap > 2.0 * joint})
    if not verdicts:
        log.warning("⚠️ Tournoi vide: aucun concurrent admissible")

    bound = None
    if j_bound is not None:
        bound = {'value': float(j_bound),
                 'respected': {n: r['wealth'] <= j_bound + 3.0 * r['se'] for n, r in rows.items()}}
    report = {
        'strategies': [{'strategy': r['strategy'], 'kind': r['kind'], 'wealth': r['wealth'], 'se': r['se'],
                        'KS_gate': r['ks_gate'], 'marginal_ks': r['marginal_ks'], 'admissible': r['admissible']}
                       for r in rows.values()],
        'verdicts': verdicts,
        'excluded': excluded,
        'empty': not verdicts,
        'passed': all(v['bridge_not_worse'] for v in verdicts),
        'ks_gate': gate,
        'j_bound': bound,
        'metadata': {'n_paths': int(n_paths), 'seeds': [int(s) for s in seeds], 'delta': config.delta,
                     'scenario': coeffs.name},
    }
    log.info(f"{'✅' if report['passed'] else '⚠️'} Tournoi terminé ({len(excluded)} concurrent(s) écarté(s))")
    return report


def martingale_orthogonality(paths: PathBundle, n_se: float = 4.0) -> Dict:
    """E[V_T B²_T] ≈ 0 lorsque b ≡ 0"""
    keep = ~paths.terminated
    product = paths.terminal('V')[keep] * paths.terminal('B2')[keep]
    if product.size < 2:
        raise ValidationException("Au moins deux trajectoires sont requises", field='n_paths')
    mean = float(product.mean())
    se = float(product.std(ddof=1) / np.sqrt(product.size))
    return {'mean': mean, 'se': se, 'passed': abs(mean) <= n_se * se}


def delta_sensitivity(coeffs: CoefficientSet, phi_field, bridge_config: BridgeConfig, H: GridField,
                      factor: float = 4.0) -> Dict:
    """Richesse du pont à δ et à δ/factor (mêmes graine et nombre de pas)"""
    rows = []
    for delta in (bridge_config.delta, bridge_config.delta / factor):
        config = replace(bridge_config, delta=delta)
        paths = simulate_half_bridge(coeffs, phi_field, config)
        estimate = expected_wealth(paths, H=H)
        rows.append({'delta': float(delta), 'wealth': estimate.mean, 'se': estimate.se})
    return {'rows': rows, 'difference': rows[0]['wealth'] - rows[1]['wealth'],
            'joint_se': float(np.hypot(rows[0]['se'], rows[1]['se']))}


def wealth_bound_check(paths: PathBundle, J: JField, coeffs: CoefficientSet, estimate: WealthEstimate,
                       n_se: float = 3.0) -> Dict:
    """
    E[W] comparée à E[J(0, x0; V_T) - J(T-δ, X; V_T)] et à la borne E[J(0, x0; V_T)]

    Requiert un JField du cas martingale (constructeur réutilisé pour chaque a).
    """
    builder = J.builder
    if builder is None or J.kind != 'martingale':
        raise ValidationException("Un JField du cas martingale est requis", field='J')
    keep = ~paths.terminated
    V, X = paths.terminal('V')[keep], paths.terminal('X')[keep]
    k_end = int(np.argmin(np.abs(builder.t - paths.times[-1])))
    start = np.array([float(builder.value(0, coeffs.x0, a)[0]) for a in V])
    end = np.array([float(builder.value(k_end, x, a)[0]) for a, x in zip(V, X)])
    identity = WealthEstimate.from_samples(start - end, 'J')
    upper = WealthEstimate.from_samples(start, 'J0')
    joint = float(np.hypot(estimate.se, identity.se))
    return {
        'wealth': estimate.mean,
        'identity': identity.mean,
        'identity_gap': estimate.mean - identity.mean,
        'joint_se': joint,
        'upper_bound': upper.mean,
        'identity_within': abs(estimate.mean - identity.mean) <= n_se * joint,
        'bound_respected': estimate.mean <= upper.mean + n_se * np.hypot(estimate.se, upper.se),
    }
