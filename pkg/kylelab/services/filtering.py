"""
Service de filtrage

Prix du teneur de marché P_t = E[V_t | F^Y_t] par filtre particulaire,
oracle de Kalman-Bucy, martingale exponentielle M et relations FBSDE.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from flask import current_app
import numpy as np
import pandas as pd
from scipy import stats

from ..context import setting
from ..utils.exceptions import ShapeException, ValidationException
from ..utils.grids import GridField, TimeGrid
from ..utils.odes import rk4_path
from ..utils.rng import step_generator
from .sde_core import CoefficientSet, PathBundle


@dataclass
class ParticleCloud:
    """Particules V^i et poids normalisés (X est porté une seule fois)"""

    V: np.ndarray
    weights: np.ndarray
    resampled_steps: List[int] = field(default_factory=list)

    @property
    def n_particles(self) -> int:
        return self.V.size

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self, values) -> float:
        return float(np.dot(self.weights, values))


@dataclass
class FilterPath:
    """États filtrés (P_t, Z_t, X_t) aux nœuds de la grille"""

    times: np.ndarray
    P: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    variance: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray
    degeneracy_steps: int = 0
    method: str = 'particle'

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.times, 'P': self.P, 'Z': self.Z, 'ESS': self.ess,
                             'resampled_flag': self.resampled.astype(int)})


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices de rééchantillonnage systématique"""
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def particle_filter(coeffs: CoefficientSet, strategy: Callable, Y, X, grid: TimeGrid, n_particles: int,
                    seed: int, path_id: int = 0, ess_threshold: Optional[float] = None,
                    degeneracy_weight: Optional[float] = None) -> FilterPath:
    """
    Filtre particulaire bootstrap pour P_t et Z_t

    Args:
        coeffs: Jeu de coefficients
        strategy: Stratégie affine u(t, v, x)
        Y: Trajectoire observée du flux d'ordres (n_steps + 1)
        X: Trajectoire du facteur X (adaptée à Y)
        grid: Grille de temps commune
        n_particles: Nombre de particules
        seed: Graine maîtresse
        path_id: Indice de la trajectoire d'observation (dérivation des flux)
        ess_threshold: Seuil relatif d'ESS déclenchant le rééchantillonnage
        degeneracy_weight: Poids maximal signalant un effondrement

    Returns:
        FilterPath
    """
    threshold = setting('ESS_THRESHOLD', ess_threshold)
    collapse = setting('DEGENERACY_WEIGHT', degeneracy_weight)
    Y, X = np.asarray(Y, dtype=float), np.asarray(X, dtype=float)
    nodes, dt = grid.nodes, grid.dt
    if Y.shape != nodes.shape or X.shape != nodes.shape:
        raise ValidationException("Y et X doivent avoir un point par nœud de la grille", field='Y')
    if int(n_particles) < 2:
        raise ValidationException("Au moins 2 particules sont requises", code='INVALID_ARGUMENT', field='n_particles')

    cloud = ParticleCloud(np.full(int(n_particles), coeffs.v0), np.full(int(n_particles), 1.0 / n_particles))
    n = len(nodes)
    P, Z, var, ess = (np.empty(n) for _ in range(4))
    resampled = np.zeros(n, dtype=bool)
    degenerate = 0
    stage = f'filter:{path_id}'

    def record(k):
        u = strategy(nodes[k], cloud.V, X[k])
        P[k] = cloud.mean(cloud.V)
        Z[k] = cloud.mean(cloud.V * u) - P[k] * cloud.mean(u)
        var[k] = cloud.mean((cloud.V - P[k]) ** 2)
        ess[k] = cloud.ess

    record(0)
    for k in range(n - 1):
        t = nodes[k]
        u = strategy(t, cloud.V, X[k])
        dY = Y[k + 1] - Y[k]
        log_w = np.log(cloud.weights) + u * dY - 0.5 * u ** 2 * dt
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        if w.max() > collapse:
            degenerate += 1
        cloud.weights = w

        noise = step_generator(seed, stage, k).standard_normal(cloud.n_particles)
        cloud.V = (cloud.V + coeffs.eval_b(t, cloud.V, X[k]) * dt
                   + coeffs.eval_sigma(t, cloud.V, X[k]) * np.sqrt(dt) * noise)

        if cloud.ess < threshold * cloud.n_particles:
            idx = systematic_resample(cloud.weights, step_generator(seed, f'{stage}:resample', k))
            cloud.V = cloud.V[idx]
            cloud.weights = np.full(cloud.n_particles, 1.0 / cloud.n_particles)
            cloud.resampled_steps.append(k + 1)
            resampled[k + 1] = True
        record(k + 1)

    if degenerate > 1:
        current_app.logger.warning(f"⚠️ Filtre dégénéré sur {degenerate} pas (trajectoire {path_id})")
    return FilterPath(nodes, P, Z, X.copy(), var, ess, resampled, degenerate, 'particle')


def kalman_bucy_oracle(coeffs: CoefficientSet, beta, S0: float, Y, X, grid: TimeGrid) -> FilterPath:
    """
    Filtre de Kalman-Bucy pour dV = (fV + gX + k)dt + σ dB¹, dY = β(V - X)dt + dB²

    La moyenne est intégrée par Euler le long de Y, la variance S par RK4:
    S' = 2fS + σ² - β²S².
    """
    linear = coeffs.linear
    if linear is None:
        raise ShapeException("L'oracle de Kalman-Bucy requiert des coefficients linéaires",
                             dependence='b non affine en (v, x)')
    beta = beta if callable(beta) else (lambda t, c=float(beta): c)
    nodes, dt = grid.nodes, grid.dt
    Y, X = np.asarray(Y, dtype=float), np.asarray(X, dtype=float)

    def rhs(t, s):
        return 2.0 * linear.f(t) * s + linear.sigma(t) ** 2 - beta(t) ** 2 * s ** 2

    S, _ = rk4_path(rhs, float(S0), nodes)
    P = np.empty_like(nodes)
    P[0] = coeffs.v0
    for k in range(len(nodes) - 1):
        t = nodes[k]
        b = beta(t)
        innovation = Y[k + 1] - Y[k] - b * (P[k] - X[k]) * dt
        P[k + 1] = P[k] + (linear.f(t) * P[k] + linear.g(t) * X[k] + linear.k(t)) * dt + S[k] * b * innovation
    Z = np.array([beta(t) for t in nodes]) * S
    zeros = np.zeros(len(nodes))
    return FilterPath(nodes, P, Z, X.copy(), S, zeros, zeros.astype(bool), 0, 'kalman_bucy')


def run_filters(coeffs: CoefficientSet, strategy: Callable, paths: PathBundle, n_particles: int, seed: int,
                n_obs: Optional[int] = None) -> List[FilterPath]:
    """Un filtre indépendant par trajectoire d'observation"""
    count = paths.n_paths if n_obs is None else min(n_obs, paths.n_paths)
    out = [particle_filter(coeffs, strategy, paths.Y[i], paths.X[i], paths.grid, n_particles, seed,
                           path_id=paths.path_offset + i) for i in range(count)]
    current_app.logger.info(f"✅ {count} filtre(s) particulaire(s) exécuté(s) ({n_particles} particules)")
    return out


def compare_to_oracle(particle: Sequence[FilterPath], oracle: Sequence[FilterPath],
                      rmse_tol: float = 0.02, z_tol: float = 0.05) -> Dict:
    """RMSE de P et erreur relative de Z entre filtre particulaire et Kalman-Bucy"""
    errs = np.concatenate([p.P - o.P for p, o in zip(particle, oracle)])
    z_num = np.concatenate([np.abs(p.Z[1:] - o.Z[1:]) for p, o in zip(particle, oracle)])
    z_den = np.concatenate([np.abs(o.Z[1:]) for o in oracle])
    rmse = float(np.sqrt(np.mean(errs ** 2)))
    z_rel = float(np.mean(z_num) / max(np.mean(z_den), 1e-300))
    return {'rmse_P': rmse, 'relative_error_Z': z_rel, 'n_paths': len(particle),
            'passed': rmse <= rmse_tol and z_rel <= z_tol}


def exponential_martingale_test(paths: PathBundle, checkpoints: Sequence[float], n_se: float = 4.0) -> Dict:
    """
    Moyenne de M_t (dM = -α M dB²) aux instants de contrôle

    Returns:
        Rapport par instant et verdict global
    """
    if paths.M is None:
        raise ValidationException("Les trajectoires ne portent pas M", field='M')
    rows = []
    for t in checkpoints:
        k = int(np.argmin(np.abs(paths.times - t)))
        values = paths.M[~paths.terminated, k]
        mean = float(values.mean())
        se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
        rows.append({'t': float(paths.times[k]), 'mean': mean, 'se': se,
                     'within': abs(mean - 1.0) <= max(n_se * se, 1e-12)})
    return {'passed': all(r['within'] for r in rows), 'checkpoints': rows}


def fbsde_relation_check(H_field: GridField, coeffs: CoefficientSet, filters: Sequence[FilterPath],
                         p_tol: float = 0.03, z_tol: float = 0.05) -> Dict:
    """
    Résidus P_t - H(t, X_t) et Z_t - ρ H_x(t, X_t) le long des filtres

    La relation est testée sous la mesure simulée (X piloté par Y).
    """
    H_x = H_field.gradient(axis=1)
    p_res, z_res, z_ref, excursion = [], [], [], []
    for path in filters:
        t, x = path.times, path.X
        excursion.append(H_field.coverage(t, x))
        p_res.append(path.P - H_field(t, x))
        target = coeffs.eval_rho(t, x) * H_x(t, x)
        z_res.append(np.abs(path.Z[1:] - target[1:]))
        z_ref.append(np.abs(target[1:]))
    p_res = np.concatenate(p_res)
    excursion_fraction = float(np.mean(excursion))
    if excursion_fraction > 0:
        current_app.logger.warning(f"⚠️ X sort du domaine de H ({excursion_fraction:.2%} des points)")
    rmse = float(np.sqrt(np.mean(p_res ** 2)))
    z_rel = float(np.mean(np.concatenate(z_res)) / max(np.mean(np.concatenate(z_ref)), 1e-300))
    return {
        'rmse_P_minus_H': rmse,
        'max_P_minus_H': float(np.max(np.abs(p_res))),
        'relative_error_Z': z_rel,
        'excursion_fraction': excursion_fraction,
        'measure': 'simulated',
        'passed': rmse <= p_tol and z_rel <= z_tol,
    }


def tower_property_check(filters: Sequence[FilterPath], paths: PathBundle, checkpoints: Sequence[float],
                         n_se: float = 4.0) -> Dict:
    """E[P_t] et E[V_t] estimés sur les mêmes trajectoires"""
    rows = []
    for t in checkpoints:
        k = int(np.argmin(np.abs(paths.times - t)))
        diff = np.array([f.P[k] for f in filters]) - paths.V[:len(filters), k]
        se = float(diff.std(ddof=1) / np.sqrt(diff.size))
        rows.append({'t': float(paths.times[k]), 'mean_diff': float(diff.mean()), 'se': se,
                     'within': abs(diff.mean()) <= n_se * se})
    return {'passed': all(r['within'] for r in rows), 'checkpoints': rows}


def innovation_regression(filters: Sequence[FilterPath], Y: np.ndarray, n_se: float = 4.0) -> Dict:
    """Régression des incréments de P sur tanh(Y_{t_k}) (pente nulle si P martingale)"""
    dP = np.concatenate([f.P[1:] - f.P[:-1] for f in filters])
    reg = np.concatenate([np.tanh(np.asarray(Y[i, :-1])) for i in range(len(filters))])
    fit = stats.linregress(reg, dP)
    return {'slope': float(fit.slope), 'stderr': float(fit.stderr),
            'passed': abs(fit.slope) <= n_se * fit.stderr}
