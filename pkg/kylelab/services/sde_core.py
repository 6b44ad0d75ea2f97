"""
Service du cœur SDE pour Kyle Lab

Ce service définit les coefficients du modèle et simule le système
(V, X, Y) sous la dynamique de référence (α ≡ 0) et sous une stratégie
markovienne u(t, v, x).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from flask import current_app
import numpy as np
from scipy import optimize, stats

from ..context import setting, with_app_context
from ..utils.exceptions import DomainException, ValidationException
from ..utils.grids import ProbeGrid, TimeGrid
from ..utils.rng import path_normals


# ---------------------------------------------------------------------------
# Loi terminale m*
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TerminalLaw:
    """
    Loi de V_T connue de l'initié

    Les composantes gaussiennes sont des triplets (poids, moyenne, variance).
    """

    kind: str
    location: float = 0.0
    components: Tuple[Tuple[float, float, float], ...] = ()
    samples: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ('point_mass', 'gaussian', 'mixture', 'empirical'):
            raise ValidationException(f"Type de loi terminale inconnu: {self.kind}", field='kind')
        if self.kind in ('gaussian', 'mixture'):
            if not self.components:
                raise ValidationException("Au moins une composante gaussienne est requise", field='components')
            weights = np.array([c[0] for c in self.components], dtype=float)
            if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-10:
                raise ValidationException("Les poids doivent être positifs et sommer à 1", field='components')
            if any(c[2] <= 0 for c in self.components):
                raise ValidationException("Les variances doivent être strictement positives", field='components')
        if self.kind == 'empirical' and len(self.samples) < 2:
            raise ValidationException("Une loi empirique requiert au moins 2 échantillons", field='samples')

    @classmethod
    def point_mass(cls, y: float) -> 'TerminalLaw':
        return cls('point_mass', location=float(y))

    @classmethod
    def gaussian(cls, mean: float, variance: float) -> 'TerminalLaw':
        return cls('gaussian', components=((1.0, float(mean), float(variance)),))

    @classmethod
    def mixture(cls, components: Sequence[Tuple[float, float, float]]) -> 'TerminalLaw':
        return cls('mixture', components=tuple((float(w), float(m), float(s2)) for w, m, s2 in components))

    @classmethod
    def empirical(cls, samples: Sequence[float]) -> 'TerminalLaw':
        return cls('empirical', samples=tuple(sorted(float(s) for s in samples)))

    @property
    def is_continuous(self) -> bool:
        return self.kind in ('gaussian', 'mixture')

    def _arrays(self):
        comp = np.array(self.components, dtype=float)
        return comp[:, 0], comp[:, 1], np.sqrt(comp[:, 2])

    def mean(self) -> float:
        if self.kind == 'point_mass':
            return self.location
        if self.kind == 'empirical':
            return float(np.mean(self.samples))
        w, m, _ = self._arrays()
        return float(np.sum(w * m))

    def variance(self) -> float:
        if self.kind == 'point_mass':
            return 0.0
        if self.kind == 'empirical':
            return float(np.var(self.samples))
        w, m, s = self._arrays()
        mean = np.sum(w * m)
        return float(np.sum(w * (s ** 2 + m ** 2)) - mean ** 2)

    def std(self) -> float:
        return float(np.sqrt(self.variance()))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == 'point_mass':
            return (x >= self.location).astype(float)
        if self.kind == 'empirical':
            return np.searchsorted(np.asarray(self.samples), x, side='right') / len(self.samples)
        w, m, s = self._arrays()
        return np.sum(w * stats.norm.cdf((x[..., None] - m) / s), axis=-1)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if not self.is_continuous:
            raise ValidationException(f"La loi {self.kind} n'a pas de densité", field='kind')
        w, m, s = self._arrays()
        return np.sum(w * stats.norm.pdf(x[..., None], m, s), axis=-1)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        if self.kind == 'point_mass':
            return np.full(q.shape, self.location)
        if self.kind == 'empirical':
            return np.quantile(np.asarray(self.samples), q)
        if self.kind == 'gaussian':
            _, m, s = self._arrays()
            return stats.norm.ppf(q, m[0], s[0])
        lo, hi = self.support(12.0)
        flat = [optimize.brentq(lambda z, p=p: float(self.cdf(z)) - p, lo, hi, xtol=1e-13) for p in q.ravel()]
        return np.asarray(flat).reshape(q.shape)

    def support(self, n_std: float = 6.0) -> Tuple[float, float]:
        """Intervalle moyenne ± n_std écarts-types (composante par composante)"""
        if self.kind == 'point_mass':
            return self.location, self.location
        if self.kind == 'empirical':
            spread = n_std * max(self.std(), 1e-12)
            return min(self.samples) - spread / 6.0, max(self.samples) + spread / 6.0
        _, m, s = self._arrays()
        return float(np.min(m - n_std * s)), float(np.max(m + n_std * s))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == 'point_mass':
            return np.full(n, self.location)
        if self.kind == 'empirical':
            return rng.choice(np.asarray(self.samples), size=n, replace=True)
        w, m, s = self._arrays()
        idx = rng.choice(len(w), size=n, p=w)
        return rng.normal(m[idx], s[idx])

    def to_dict(self) -> Dict:
        return {'kind': self.kind, 'location': self.location,
                'components': [list(c) for c in self.components], 'n_samples': len(self.samples)}


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearStructure:
    """b = f v + g x + k, sigma = sigma(t), mu = mu1 x + mu0, rho = rho(t)"""

    f: Callable[[float], float]
    g: Callable[[float], float]
    k: Callable[[float], float]
    sigma: Callable[[float], float]
    mu1: Callable[[float], float]
    mu0: Callable[[float], float]
    rho: Callable[[float], float]

    def drift_matrix(self, t: float) -> np.ndarray:
        return np.array([[self.f(t), self.g(t)], [0.0, self.mu1(t)]])

    def drift_constant(self, t: float) -> np.ndarray:
        return np.array([self.k(t), self.mu0(t)])

    def diffusion_diag(self, t: float) -> np.ndarray:
        return np.array([self.sigma(t), self.rho(t)])


@dataclass(frozen=True)
class CoefficientSet:
    """Fonctions du modèle, loi terminale et états initiaux (immuable)"""

    b: Callable
    sigma: Callable
    mu: Callable
    rho: Callable
    g: Callable
    m_star: TerminalLaw
    v0: float = 0.0
    x0: float = 0.0
    T: float = 1.0
    name: str = 'custom'
    linear: Optional[LinearStructure] = None
    x_domain: Tuple[float, float] = (-50.0, 50.0)
    metadata: Dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationException("L'horizon T doit être strictement positif", field='T')

    def eval_b(self, t, v, x):
        return _broadcast(self.b(t, v, x), v, x)

    def eval_sigma(self, t, v, x):
        return _broadcast(self.sigma(t, v, x), v, x)

    def eval_mu(self, t, x):
        return _broadcast(self.mu(t, x), x)

    def eval_rho(self, t, x):
        return _broadcast(self.rho(t, x), x)

    def eval_g(self, x):
        return _broadcast(self.g(x), x)

    @property
    def xi0(self) -> np.ndarray:
        return np.array([self.v0, self.x0])


def _broadcast(value, *like):
    shape = np.broadcast_shapes(*[np.shape(a) for a in like])
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


@dataclass
class AssumptionReport:
    """Diagnostic des hypothèses de régularité sur une grille de sondage"""

    passed: bool
    lipschitz: Dict[str, float]
    lipschitz_bound: float
    min_sigma: float
    min_rho: float
    g_monotone: bool
    lambda0_estimate: float
    failures: List[Dict[str, str]]

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'lipschitz': self.lipschitz,
            'lipschitz_bound': self.lipschitz_bound,
            'min_sigma': self.min_sigma,
            'min_rho': self.min_rho,
            'g_monotone': self.g_monotone,
            'lambda0_estimate': self.lambda0_estimate,
            'failures': self.failures,
        }


def validate_assumptions(coeffs: CoefficientSet, probe: ProbeGrid,
                         lipschitz_bound: Optional[float] = None,
                         ellipticity: float = 0.0) -> AssumptionReport:
    """
    Vérifie numériquement Lipschitz, ellipticité, positivité de rho et monotonie de g

    Args:
        coeffs: Jeu de coefficients
        probe: Grille de sondage (t, v, x)
        lipschitz_bound: Constante L déclarée (configuration par défaut)
        ellipticity: Seuil λ₀ imposé à sigma (strictement positif dans tous les cas)

    Returns:
        AssumptionReport
    """
    bound = setting('LIPSCHITZ_BOUND', lipschitz_bound)
    tt, vv, xx = probe.mesh()
    t2, x2 = probe.mesh_tx()
    failures = []

    fields = {
        'b': (coeffs.eval_b(tt, vv, xx), (tt, vv, xx)),
        'sigma': (coeffs.eval_sigma(tt, vv, xx), (tt, vv, xx)),
        'mu': (coeffs.eval_mu(t2, x2), (t2, None, x2)),
        'rho': (coeffs.eval_rho(t2, x2), (t2, None, x2)),
    }

    lipschitz = {}
    for name, (values, coords) in fields.items():
        bad = ~np.isfinite(values)
        if bad.any():
            idx = np.argwhere(bad)[0]
            node = {'t': float(coords[0][tuple(idx)]), 'x': float(coords[2][tuple(idx)])}
            if coords[1] is not None:
                node['v'] = float(coords[1][tuple(idx)])
            failures.append({'code': 'NON_FINITE', 'coefficient': name,
                             'message': f"Valeur non finie de {name} au nœud {node}"})
            lipschitz[name] = float('inf')
            continue
        quotients = []
        state_axes = [(1, probe.v), (2, probe.x)] if coords[1] is not None else [(1, probe.x)]
        for axis, nodes in state_axes:
            delta = np.abs(np.diff(values, axis=axis))
            step = np.diff(nodes).reshape([-1 if i == axis else 1 for i in range(values.ndim)])
            quotients.append(float(np.max(delta / step)))
        lipschitz[name] = max(quotients)
        if lipschitz[name] > bound:
            failures.append({'code': 'LIPSCHITZ', 'coefficient': name,
                             'message': f"Quotient de Lipschitz de {name} = {lipschitz[name]:.4g} > {bound}"})

    sigma_vals = fields['sigma'][0]
    rho_vals = fields['rho'][0]
    min_sigma = float(np.nanmin(sigma_vals)) if np.isfinite(sigma_vals).any() else float('nan')
    min_rho = float(np.nanmin(rho_vals)) if np.isfinite(rho_vals).any() else float('nan')
    if not (min_sigma > 0 and min_sigma >= ellipticity):
        idx = np.unravel_index(np.nanargmin(sigma_vals), sigma_vals.shape)
        failures.append({'code': 'ELLIPTICITY', 'coefficient': 'sigma',
                         'message': f"Ellipticité violée: sigma = {min_sigma:.4g} en "
                                    f"(t={tt[idx]:.4g}, v={vv[idx]:.4g}, x={xx[idx]:.4g})"})
    if not min_rho > 0:
        failures.append({'code': 'RHO_POSITIVITY', 'coefficient': 'rho',
                         'message': f"rho doit être strictement positif (min = {min_rho:.4g})"})

    g_vals = coeffs.eval_g(probe.x)
    g_monotone = bool(np.all(np.isfinite(g_vals)) and np.all(np.diff(g_vals) > 0))
    if not g_monotone:
        failures.append({'code': 'G_NOT_INCREASING', 'coefficient': 'g',
                         'message': "g n'est pas strictement croissante sur la grille"})

    report = AssumptionReport(
        passed=not failures,
        lipschitz=lipschitz,
        lipschitz_bound=float(bound),
        min_sigma=min_sigma,
        min_rho=min_rho,
        g_monotone=g_monotone,
        lambda0_estimate=min_sigma,
        failures=failures,
    )
    level = 'info' if report.passed else 'warning'
    getattr(current_app.logger, level)(
        f"{'✅' if report.passed else '⚠️'} Hypothèses {coeffs.name}: {len(failures)} échec(s)")
    return report


def g_inverse(coeffs: CoefficientSet, v):
    """
    Inverse de g par bissection sur le domaine configuré

    Args:
        coeffs: Jeu de coefficients (g strictement croissante)
        v: Valeur(s) cible(s)

    Returns:
        x tel que g(x) = v (même forme que v)
    """
    lo, hi = coeffs.x_domain
    g_lo, g_hi = float(coeffs.eval_g(lo)), float(coeffs.eval_g(hi))
    values = np.atleast_1d(np.asarray(v, dtype=float))
    out = np.empty_like(values)
    for i, target in enumerate(values.ravel()):
        if not g_lo <= target <= g_hi:
            raise DomainException(
                f"v={target} hors de [g(x_min), g(x_max)] = [{g_lo}, {g_hi}]", value=(g_lo, g_hi))
        if target == g_lo:
            out.flat[i] = lo
            continue
        if target == g_hi:
            out.flat[i] = hi
            continue
        out.flat[i] = optimize.bisect(lambda z: float(coeffs.eval_g(z)) - target, lo, hi,
                                      xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if np.ndim(v) == 0:
        return float(out[0])
    return out.reshape(np.shape(v))


# ---------------------------------------------------------------------------
# Trajectoires
# ---------------------------------------------------------------------------

@dataclass
class PathBundle:
    """
    Lot de trajectoires discrétisées sur une grille commune

    Les tableaux ont la forme (n_paths, n_nodes). Itérer sur un lot renvoie
    un lot par trajectoire.
    """

    grid: TimeGrid
    seed: int
    path_offset: int
    V: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    alpha: np.ndarray
    M: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None
    truncation_index: Optional[np.ndarray] = None
    level_hits: Optional[np.ndarray] = None
    levels: Tuple[float, ...] = ()
    terminated: Optional[np.ndarray] = None
    stage: str = 'paths'

    def __post_init__(self):
        n = self.V.shape[0]
        if self.truncation_index is None:
            self.truncation_index = np.full(n, -1, dtype=int)
        if self.terminated is None:
            self.terminated = np.zeros(n, dtype=bool)

    @property
    def n_paths(self) -> int:
        return self.V.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def truncated(self) -> np.ndarray:
        return self.truncation_index >= 0

    def __len__(self):
        return self.n_paths

    def __iter__(self):
        for i in range(self.n_paths):
            yield self.path(i)

    def _take(self, rows) -> Dict:
        arrays = {}
        for name in ('V', 'X', 'Y', 'B1', 'B2', 'alpha', 'M', 'L', 'truncation_index', 'terminated'):
            value = getattr(self, name)
            arrays[name] = None if value is None else value[rows]
        arrays['level_hits'] = None if self.level_hits is None else self.level_hits[:, rows]
        return arrays

    def path(self, i: int) -> 'PathBundle':
        rows = slice(i, i + 1)
        return PathBundle(self.grid, self.seed, self.path_offset + i, levels=self.levels,
                          stage=self.stage, **self._take(rows))

    def select(self, mask: np.ndarray) -> 'PathBundle':
        """Sous-lot (les indices globaux ne sont plus contigus)"""
        return PathBundle(self.grid, self.seed, self.path_offset, levels=self.levels,
                          stage=self.stage, **self._take(np.asarray(mask)))

    def terminal(self, name: str) -> np.ndarray:
        return getattr(self, name)[:, -1]

    @classmethod
    def concatenate(cls, bundles: Sequence['PathBundle']) -> 'PathBundle':
        first = bundles[0]
        joined = {}
        for name in ('V', 'X', 'Y', 'B1', 'B2', 'alpha', 'M', 'L', 'truncation_index', 'terminated'):
            parts = [getattr(b, name) for b in bundles]
            joined[name] = None if parts[0] is None else np.concatenate(parts, axis=0)
        hits = [b.level_hits for b in bundles]
        joined['level_hits'] = None if hits[0] is None else np.concatenate(hits, axis=1)
        return cls(first.grid, first.seed, first.path_offset, levels=first.levels, stage=first.stage, **joined)

    def to_frame(self, max_paths: Optional[int] = None):
        """Format long: colonnes path, t, V, X, Y, B1, B2, alpha"""
        import pandas as pd

        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        nodes = self.times
        frames = []
        for i in range(n):
            frames.append(pd.DataFrame({
                'path': self.path_offset + i, 't': nodes,
                'V': self.V[i], 'X': self.X[i], 'Y': self.Y[i],
                'B1': self.B1[i], 'B2': self.B2[i], 'alpha': self.alpha[i],
            }))
        return pd.concat(frames, ignore_index=True)


def _check_sizes(grid: TimeGrid, n_paths: int, coeffs: CoefficientSet):
    if int(n_paths) <= 0:
        raise ValidationException("n_paths doit être strictement positif", code='INVALID_ARGUMENT', field='n_paths')
    if int(grid.n_steps) <= 0:
        raise ValidationException("n_steps doit être strictement positif", code='INVALID_ARGUMENT', field='n_steps')
    if grid.t_end > coeffs.T * (1 + 1e-12):
        raise ValidationException(f"t_end={grid.t_end} dépasse l'horizon T={coeffs.T}",
                                  code='INVALID_ARGUMENT', field='t_end')


def integrate_euler(coeffs: CoefficientSet, grid: TimeGrid, dB1: np.ndarray, dB2: np.ndarray,
                    strategy: Optional[Callable] = None, alpha_cap: Optional[float] = None,
                    seed: int = 0, path_offset: int = 0, stage: str = 'paths') -> PathBundle:
    """
    Schéma d'Euler-Maruyama à incréments browniens fournis

    Args:
        coeffs: Jeu de coefficients
        grid: Grille de temps
        dB1: Incréments de B¹, forme (n_paths, n_steps)
        dB2: Incréments de B², forme (n_paths, n_steps)
        strategy: u(t, v, x) ou None pour la dynamique de référence
        alpha_cap: Seuil de troncature de |α|

    Returns:
        PathBundle
    """
    cap = setting('ALPHA_CAP', alpha_cap)
    n_paths, n_steps = dB1.shape
    nodes, dt = grid.nodes, grid.dt

    V = np.empty((n_paths, n_steps + 1))
    X = np.empty((n_paths, n_steps + 1))
    alpha = np.zeros((n_paths, n_steps + 1))
    V[:, 0] = coeffs.v0
    X[:, 0] = coeffs.x0
    trunc = np.full(n_paths, -1, dtype=int)

    def control(k):
        a = np.array(_broadcast(strategy(nodes[k], V[:, k], X[:, k]), V[:, k]), dtype=float)
        bad = ~np.isfinite(a) | (np.abs(a) > cap)
        trunc[bad & (trunc < 0)] = k
        return np.where(np.isfinite(a), np.clip(a, -cap, cap), 0.0)

    for k in range(n_steps):
        t = nodes[k]
        if strategy is not None:
            alpha[:, k] = control(k)
        dY = alpha[:, k] * dt + dB2[:, k]
        V[:, k + 1] = V[:, k] + coeffs.eval_b(t, V[:, k], X[:, k]) * dt + coeffs.eval_sigma(t, V[:, k], X[:, k]) * dB1[:, k]
        X[:, k + 1] = X[:, k] + coeffs.eval_mu(t, X[:, k]) * dt + coeffs.eval_rho(t, X[:, k]) * dY
    if strategy is not None:
        alpha[:, n_steps] = control(n_steps)

    zeros = np.zeros((n_paths, 1))
    B1 = np.concatenate([zeros, np.cumsum(dB1, axis=1)], axis=1)
    B2 = np.concatenate([zeros, np.cumsum(dB2, axis=1)], axis=1)
    Y = np.concatenate([zeros, np.cumsum(alpha[:, :-1] * dt, axis=1)], axis=1) + B2
    log_m = np.concatenate([zeros, np.cumsum(-alpha[:, :-1] * dB2 - 0.5 * alpha[:, :-1] ** 2 * dt, axis=1)], axis=1)

    return PathBundle(grid, seed, path_offset, V, X, Y, B1, B2, alpha, M=np.exp(log_m),
                      truncation_index=trunc, stage=stage)


def map_chunks(func: Callable[[int, int], PathBundle], n_paths: int, path_offset: int = 0,
               chunk_size: Optional[int] = None, n_workers: Optional[int] = None) -> PathBundle:
    """Exécute func(offset, count) par blocs d'indices globaux et concatène"""
    size = max(1, int(setting('CHUNK_SIZE', chunk_size)))
    workers = max(1, int(setting('N_WORKERS', n_workers)))
    chunks = [(path_offset + start, min(size, n_paths - start)) for start in range(0, n_paths, size)]
    if workers == 1 or len(chunks) == 1:
        parts = [func(offset, count) for offset, count in chunks]
    else:
        task = with_app_context(lambda c: func(*c))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, chunks))
    return PathBundle.concatenate(parts)


def brownian_shocks(grid, seed, stage, offset, count):
    scale = np.sqrt(grid.dt)
    dB1 = path_normals(seed, stage, 0, offset, count, grid.n_steps) * scale
    dB2 = path_normals(seed, stage, 1, offset, count, grid.n_steps) * scale
    return dB1, dB2


def simulate_reference(coeffs: CoefficientSet, grid: TimeGrid, seed: int, n_paths: int,
                       stage: str = 'paths', path_offset: int = 0,
                       chunk_size: Optional[int] = None, n_workers: Optional[int] = None) -> PathBundle:
    """
    Trajectoires sous la mesure de référence: Y brownien, α ≡ 0

    Args:
        coeffs: Jeu de coefficients
        grid: Grille de temps
        seed: Graine maîtresse
        n_paths: Nombre de trajectoires

    Returns:
        PathBundle
    """
    _check_sizes(grid, n_paths, coeffs)

    def run(offset, count):
        dB1, dB2 = brownian_shocks(grid, seed, stage, offset, count)
        return integrate_euler(coeffs, grid, dB1, dB2, None, seed=seed, path_offset=offset, stage=stage)

    bundle = map_chunks(run, n_paths, path_offset, chunk_size, n_workers)
    current_app.logger.debug(f"🧪 {n_paths} trajectoires de référence simulées ({coeffs.name})")
    return bundle


def simulate_controlled(coeffs: CoefficientSet, strategy: Callable, grid: TimeGrid, seed: int, n_paths: int,
                        stage: str = 'paths', path_offset: int = 0, alpha_cap: Optional[float] = None,
                        chunk_size: Optional[int] = None, n_workers: Optional[int] = None) -> PathBundle:
    """Trajectoires sous la stratégie α_k = u(t_k, V_k, X_k)"""
    _check_sizes(grid, n_paths, coeffs)

    def run(offset, count):
        dB1, dB2 = brownian_shocks(grid, seed, stage, offset, count)
        return integrate_euler(coeffs, grid, dB1, dB2, strategy, alpha_cap,
                               seed=seed, path_offset=offset, stage=stage)

    bundle = map_chunks(run, n_paths, path_offset, chunk_size, n_workers)
    n_trunc = int(bundle.truncated.sum())
    if n_trunc:
        current_app.logger.warning(f"⚠️ {n_trunc} trajectoire(s) tronquée(s) par le plafond de α")
    return bundle
