"""
Service du pont (diffusion conditionnée)

Simulation sous la probabilité minimale (pont complet) et sous la mesure du
demi-pont, avec temps de troncature τ_n et diagnostics de loi terminale.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

from flask import current_app
import numpy as np
from scipy import stats

from ..context import setting
from ..utils.exceptions import ConfigurationException, InsufficientSampleException
from ..utils.grids import TimeGrid
from .sde_core import CoefficientSet, PathBundle, TerminalLaw, brownian_shocks, map_chunks

MODES = ('full', 'half')


@dataclass(frozen=True)
class BridgeConfig:
    """Paramètres d'une simulation de pont"""

    truncation_levels: Tuple[float, ...] = (10.0, 1.0e2, 1.0e3, 1.0e4)
    delta: float = 1.0e-3
    n_paths: int = 10000
    seed: int = 0
    n_steps: int = 1000
    apply_truncation: Optional[float] = None

    def __post_init__(self):
        levels = tuple(float(level) for level in self.truncation_levels)
        if not levels or any(level <= 0 for level in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigurationException("Les niveaux de troncature doivent être positifs et strictement croissants",
                                         setting='truncation_levels')
        if self.apply_truncation is not None and float(self.apply_truncation) not in levels:
            raise ConfigurationException("Le niveau appliqué doit figurer parmi les niveaux déclarés",
                                         setting='apply_truncation')
        if int(self.n_paths) <= 0 or int(self.n_steps) <= 0:
            raise ConfigurationException("n_paths et n_steps doivent être strictement positifs", setting='n_paths')
        object.__setattr__(self, 'truncation_levels', levels)

    def grid(self, T: float) -> TimeGrid:
        return TimeGrid.for_bridge(T, self.n_steps, self.delta)

    @classmethod
    def from_settings(cls, **overrides) -> 'BridgeConfig':
        base = {'truncation_levels': tuple(current_app.config['TRUNCATION_LEVELS'])}
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


def _bridge_euler(coeffs: CoefficientSet, phi_field, grid: TimeGrid, dB1, dB2, mode: str,
                  levels: Sequence[float], truncate_at: Optional[float], seed: int, offset: int,
                  stage: str) -> PathBundle:
    n_paths, n_steps = dB1.shape
    nodes, dt = grid.nodes, grid.dt
    V = np.empty((n_paths, n_steps + 1))
    X = np.empty((n_paths, n_steps + 1))
    alpha = np.zeros((n_paths, n_steps + 1))
    V[:, 0], X[:, 0] = coeffs.v0, coeffs.x0
    hits = np.full((len(levels), n_paths), -1, dtype=int)
    terminated = np.zeros(n_paths, dtype=bool)
    applied = None if truncate_at is None else list(levels).index(truncate_at)

    def drift_correction(k):
        t = nodes[k]
        with np.errstate(all='ignore'):
            grad = phi_field.grad_log_phi(t, V[:, k], X[:, k])
            th1 = coeffs.eval_sigma(t, V[:, k], X[:, k]) * grad[..., 0]
            th2 = coeffs.eval_rho(t, X[:, k]) * grad[..., 1]
            bad = ~(np.isfinite(th1) & np.isfinite(th2)) | phi_field.is_degenerate(t, V[:, k], X[:, k])
        terminated[bad] = True
        th1, th2 = np.where(terminated, 0.0, th1), np.where(terminated, 0.0, th2)
        norm = np.hypot(th1, th2)
        for j, level in enumerate(levels):
            hits[j, (norm >= level) & (hits[j] < 0) & ~terminated] = k
        if applied is not None:
            stopped = hits[applied] >= 0
            th1, th2 = np.where(stopped, 0.0, th1), np.where(stopped, 0.0, th2)
        return th1, th2

    for k in range(n_steps):
        t = nodes[k]
        th1, th2 = drift_correction(k)
        alpha[:, k] = th2
        sig = coeffs.eval_sigma(t, V[:, k], X[:, k])
        rho = coeffs.eval_rho(t, X[:, k])
        dv = coeffs.eval_b(t, V[:, k], X[:, k]) * dt + sig * dB1[:, k]
        if mode == 'full':
            dv = dv + sig * th1 * dt
        dx = (coeffs.eval_mu(t, X[:, k]) + rho * th2) * dt + rho * dB2[:, k]
        V[:, k + 1] = np.where(terminated, V[:, k], V[:, k] + dv)
        X[:, k + 1] = np.where(terminated, X[:, k], X[:, k] + dx)
    alpha[:, n_steps] = drift_correction(n_steps)[1]

    zeros = np.zeros((n_paths, 1))
    B1 = np.concatenate([zeros, np.cumsum(dB1, axis=1)], axis=1)
    B2 = np.concatenate([zeros, np.cumsum(dB2, axis=1)], axis=1)
    Y = np.concatenate([zeros, np.cumsum(alpha[:, :-1] * dt, axis=1)], axis=1) + B2
    log_m = np.concatenate([zeros, np.cumsum(-alpha[:, :-1] * dB2 - 0.5 * alpha[:, :-1] ** 2 * dt, axis=1)], axis=1)

    truncation_index = hits[applied] if applied is not None else np.full(n_paths, -1, dtype=int)
    return PathBundle(grid, seed, offset, V, X, Y, B1, B2, alpha, M=np.exp(log_m),
                      truncation_index=truncation_index.copy(), level_hits=hits,
                      levels=tuple(levels), terminated=terminated, stage=stage)


def _simulate(coeffs, phi_field, config: BridgeConfig, grid: Optional[TimeGrid], mode: str) -> PathBundle:
    if mode not in MODES:
        raise ConfigurationException(f"Mode de pont inconnu: {mode}", setting='mode')
    grid = grid or config.grid(coeffs.T)
    if grid.t_end > coeffs.T - config.delta * (1 - 1e-9):
        raise ConfigurationException("La grille du pont doit s'arrêter en T - δ", setting='delta')
    stage = f'{mode}_bridge'

    def run(offset, count):
        dB1, dB2 = brownian_shocks(grid, config.seed, stage, offset, count)
        return _bridge_euler(coeffs, phi_field, grid, dB1, dB2, mode, config.truncation_levels,
                             config.apply_truncation, config.seed, offset, stage)

    bundle = map_chunks(run, int(config.n_paths))
    log = current_app.logger
    n_term = int(bundle.terminated.sum())
    if n_term:
        log.warning(f"⚠️ {n_term} trajectoire(s) interrompue(s) (φ dégénérée)")
    log.info(f"✅ Pont {mode}: {bundle.n_paths} trajectoires simulées jusqu'à T - δ = {grid.t_end:.6g}")
    return bundle


def simulate_full_bridge(coeffs: CoefficientSet, phi_field, bridge_config: BridgeConfig,
                         grid: Optional[TimeGrid] = None) -> PathBundle:
    """
    Pont complet: dérives (b + σθ¹, μ + ρθ²) et chocs indépendants (W¹, W²)

    Args:
        coeffs: Jeu de coefficients
        phi_field: Champ φ (conditionnement propre vérifié en amont)
        bridge_config: Paramètres du pont
        grid: Grille [0, T - δ] (dérivée de la configuration par défaut)

    Returns:
        PathBundle (itérable trajectoire par trajectoire)
    """
    return _simulate(coeffs, phi_field, bridge_config, grid, 'full')


def simulate_half_bridge(coeffs: CoefficientSet, phi_field, bridge_config: BridgeConfig,
                         grid: Optional[TimeGrid] = None) -> PathBundle:
    """
    Demi-pont: V garde la dérive b, X reçoit μ + ρθ²; α = θ² est enregistré
    """
    return _simulate(coeffs, phi_field, bridge_config, grid, 'half')


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class PinningReport:
    """Écarts terminaux |V_{T-δ} - g(X_{T-δ})|"""

    gaps: np.ndarray = field(repr=False)
    mean: float
    median: float
    p95: float
    se: float
    truncated_fraction: Dict[float, float]
    n_terminated: int
    tol_mean: float
    tol_p95: float

    @property
    def passed(self) -> bool:
        return self.mean <= self.tol_mean and self.p95 <= self.tol_p95

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'mean_gap': self.mean,
            'median_gap': self.median,
            'p95_gap': self.p95,
            'se': self.se,
            'truncated_fraction': {f'{k:g}': v for k, v in self.truncated_fraction.items()},
            'n_terminated': self.n_terminated,
            'tolerances': {'mean': self.tol_mean, 'p95': self.tol_p95},
        }


def _horizon_gap(paths: PathBundle, coeffs: CoefficientSet) -> float:
    return coeffs.T - paths.times[-1]


def pinning_check(paths: PathBundle, coeffs: CoefficientSet, tolerances: Optional[Dict] = None) -> PinningReport:
    """
    Statistiques d'écart au graphe de g en fin de grille

    Args:
        paths: Trajectoires simulées jusqu'à T - δ
        coeffs: Jeu de coefficients
        tolerances: {'mean': ..., 'p95': ...} (par défaut 3√δ et 8√δ)

    Returns:
        PinningReport
    """
    delta = max(_horizon_gap(paths, coeffs), 0.0)
    scale = np.sqrt(delta) if delta > 0 else np.sqrt(paths.grid.dt)
    tol = {'mean': 3.0 * scale, 'p95': 8.0 * scale}
    tol.update(tolerances or {})

    keep = ~paths.terminated
    gaps = np.abs(paths.terminal('V')[keep] - coeffs.eval_g(paths.terminal('X')[keep]))
    fractions = {}
    if paths.level_hits is not None:
        for j, level in enumerate(paths.levels):
            fractions[level] = float(np.mean(paths.level_hits[j] >= 0))
    if gaps.size == 0:
        raise InsufficientSampleException("Aucune trajectoire exploitable", available=0, required=1)

    report = PinningReport(
        gaps=gaps, mean=float(gaps.mean()), median=float(np.median(gaps)), p95=float(np.percentile(gaps, 95)),
        se=float(gaps.std(ddof=1) / np.sqrt(gaps.size)) if gaps.size > 1 else 0.0,
        truncated_fraction=fractions, n_terminated=int((~keep).sum()),
        tol_mean=float(tol['mean']), tol_p95=float(tol['p95']))
    current_app.logger.info(
        f"📊 Ancrage: écart moyen {report.mean:.4g} (tolérance {report.tol_mean:.4g})")
    return report


def terminal_law_check(paths: PathBundle, m_star: TerminalLaw, ks_threshold: float = 0.03,
                       w1_threshold: Optional[float] = None, min_paths: Optional[int] = None,
                       T: Optional[float] = None) -> Dict:
    """
    Distances de Kolmogorov-Smirnov et de Wasserstein entre la loi de V_{T-δ} et m*

    Args:
        paths: Trajectoires de pont
        m_star: Loi cible
        ks_threshold: Seuil KS (lois continues)
        w1_threshold: Seuil W1 (masse de Dirac), 3√δ par défaut
        min_paths: Nombre minimal de trajectoires non tronquées
        T: Horizon (pour δ)

    Returns:
        Rapport (dict)
    """
    required = int(setting('MIN_LAW_PATHS', min_paths))
    keep = ~paths.terminated & ~paths.truncated
    samples = paths.terminal('V')[keep]
    if samples.size < required:
        raise InsufficientSampleException(
            f"{samples.size} trajectoires exploitables, {required} requises", available=int(samples.size),
            required=required)

    delta = (T - paths.times[-1]) if T is not None else paths.grid.dt
    ks = float(stats.kstest(samples, m_star.cdf).statistic)
    if m_star.kind == 'point_mass':
        w1 = float(np.mean(np.abs(samples - m_star.location)))
    else:
        probs = (np.arange(samples.size) + 0.5) / samples.size
        w1 = float(stats.wasserstein_distance(samples, m_star.ppf(probs)))

    w1_tol = w1_threshold if w1_threshold is not None else 3.0 * np.sqrt(max(delta, 0.0))
    passed = w1 <= w1_tol if m_star.kind == 'point_mass' else ks <= ks_threshold
    return {
        'passed': bool(passed),
        'ks': ks,
        'wasserstein_1': w1,
        'n_used': int(samples.size),
        'n_excluded': int((~keep).sum()),
        'thresholds': {'ks': ks_threshold, 'wasserstein_1': float(w1_tol)},
        'law': m_star.to_dict(),
    }


def marginal_agreement(first: PathBundle, second: PathBundle, t: float, coordinate: str = 'X') -> Dict:
    """Statistique KS à deux échantillons des marginales d'une coordonnée à l'instant t"""
    a_idx = int(np.argmin(np.abs(first.times - t)))
    b_idx = int(np.argmin(np.abs(second.times - t)))
    a = getattr(first, coordinate)[~first.terminated, a_idx]
    b = getattr(second, coordinate)[~second.terminated, b_idx]
    result = stats.ks_2samp(a, b)
    return {'t': float(first.times[a_idx]), 'coordinate': coordinate, 'ks': float(result.statistic),
            'p_value': float(result.pvalue)}


def terminal_frame(paths: PathBundle, coeffs: CoefficientSet):
    """Paires terminales (V, X, indicateurs) pour l'export CSV"""
    import pandas as pd

    return pd.DataFrame({
        'path': paths.path_offset + np.arange(paths.n_paths),
        'V': paths.terminal('V'),
        'X': paths.terminal('X'),
        'gap': np.abs(paths.terminal('V') - coeffs.eval_g(paths.terminal('X'))),
        'truncated': paths.truncated.astype(int),
        'terminated': paths.terminated.astype(int),
    })
