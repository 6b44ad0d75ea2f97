"""
Service de structure affine

Champs A/B, système de compatibilité I₀, I₁, I₂, G, cas particuliers 1 à 5
et modèle linéaire-gaussien de référence (équation de Riccati).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

from flask import current_app
import numpy as np
from numpy.polynomial import polynomial as P
from scipy import integrate

from ..context import setting
from ..utils.exceptions import DomainException, ShapeException, SolverDivergedException, ValidationException
from ..utils.grids import GridField, ProbeGrid, TimeGrid, central_difference
from ..utils.odes import rk4_path
from .sde_core import CoefficientSet, LinearStructure, TerminalLaw


def _as_time_function(value) -> Callable:
    if callable(value):
        return value
    return lambda t: float(value)


# ---------------------------------------------------------------------------
# Stratégies affines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineStrategy:
    """u(t, v, x) = u0(t, x) + u1(t, x) v"""

    u0: Callable
    u1: Callable
    name: str = 'affine'

    def __call__(self, t, v, x):
        v = np.asarray(v, dtype=float)
        x = np.asarray(x, dtype=float)
        return self.u0(t, x) + self.u1(t, x) * v

    def linear_growth(self, probe: ProbeGrid) -> Dict:
        """Estimation de K(t) = max |u| / (1 + |v| + |x|) sur la grille de sondage"""
        tt, vv, xx = probe.mesh()
        ratio = np.abs(self(tt, vv, xx)) / (1.0 + np.abs(vv) + np.abs(xx))
        k_t = ratio.max(axis=(1, 2))
        return {'K': k_t.tolist(), 't': probe.t.tolist(), 'passed': bool(np.all(np.isfinite(k_t)))}

    def scaled(self, factor: float) -> 'AffineStrategy':
        return AffineStrategy(lambda t, x: factor * self.u0(t, x), lambda t, x: factor * self.u1(t, x),
                              name=f'{factor:g}*{self.name}')

    @classmethod
    def zero(cls) -> 'AffineStrategy':
        return cls(lambda t, x: np.zeros(np.shape(x)), lambda t, x: np.zeros(np.shape(x)), name='zero')


def affine_from_pricing(H: Callable, beta) -> AffineStrategy:
    """Forme réduite α = β (V - H(t, X)): u0 = -β H, u1 = β"""
    beta = _as_time_function(beta)
    return AffineStrategy(lambda t, x: -beta(t) * np.asarray(H(t, x), dtype=float),
                          lambda t, x: beta(t) * np.ones(np.shape(x)), name='pricing')


# ---------------------------------------------------------------------------
# Fonction h(t, v)
# ---------------------------------------------------------------------------

class HFunction:
    """
    Fonction h(t, v) et ses dérivées (différences centrées si non fournies)

    Args:
        fn: h(t, v)
        dt: ∂_t h optionnelle
        dv: ∂_v h optionnelle
        dvv: ∂_vv h optionnelle
        degree: Degré en v connu (None si quelconque)
    """

    def __init__(self, fn, dt=None, dv=None, dvv=None, degree=None, step=1e-3, name='h'):
        self.fn = fn
        self._dt, self._dv, self._dvv = dt, dv, dvv
        self.degree = degree
        self.step = step
        self.name = name

    def __call__(self, t, v):
        return self.fn(t, v)

    def dt(self, t, v):
        if self._dt is not None:
            return self._dt(t, v)
        return central_difference(lambda s: self.fn(s, v), t, self.step)

    def dv(self, t, v):
        if self._dv is not None:
            return self._dv(t, v)
        return central_difference(lambda w: self.fn(t, w), v, self.step)

    def dvv(self, t, v):
        if self._dvv is not None:
            return self._dvv(t, v)
        return central_difference(lambda w: self.fn(t, w), v, 10 * self.step, order=2)

    @classmethod
    def zero(cls) -> 'HFunction':
        zero = lambda t, v: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(v)))
        return cls(zero, dt=zero, dv=zero, dvv=zero, degree=0, name='zero')

    @classmethod
    def polynomial(cls, h0, h1=None, h2=None, step=1e-4) -> 'HFunction':
        """h = h0(t) + h1(t) v + h2(t) v²"""
        parts = [_as_time_function(c) for c in (h0, h1 or 0.0, h2 or 0.0)]
        degree = 2 if h2 is not None else (1 if h1 is not None else 0)

        def coef(i, t):
            return np.vectorize(parts[i], otypes=[float])(np.asarray(t, dtype=float))

        def dcoef(i, t):
            return central_difference(lambda s: coef(i, s), t, step)

        return cls(lambda t, v: coef(0, t) + coef(1, t) * v + coef(2, t) * np.asarray(v) ** 2,
                   dt=lambda t, v: dcoef(0, t) + dcoef(1, t) * v + dcoef(2, t) * np.asarray(v) ** 2,
                   dv=lambda t, v: coef(1, t) + 2.0 * coef(2, t) * np.asarray(v),
                   dvv=lambda t, v: 2.0 * coef(2, t) * np.ones(np.shape(v)),
                   degree=degree, name='polynomial')


# ---------------------------------------------------------------------------
# Champs A et B
# ---------------------------------------------------------------------------

class ABFields:
    """
    A(t,x) = ∫₀ˣ u0/ρ dy et B(t,x) = ∫₀ˣ u1/ρ dy par Simpson composite

    A_x et B_x sont exacts (intégrandes), les autres dérivées sont des
    différences centrées extrapolées de Richardson.
    """

    def __init__(self, strategy: AffineStrategy, coeffs: CoefficientSet, n_quad: int = 64,
                 rho_floor: Optional[float] = None, step: float = 1e-3):
        if n_quad < 2 or n_quad % 2:
            raise ValidationException("n_quad doit être pair et au moins 2", field='n_quad')
        self.strategy = strategy
        self.coeffs = coeffs
        self.nodes = np.linspace(0.0, 1.0, n_quad + 1)
        self.rho_floor = setting('RHO_FLOOR', rho_floor)
        self.step = step
        self.A_field = None
        self.B_field = None

    def _ratio(self, u, t, y):
        rho = self.coeffs.eval_rho(t, y)
        if np.any(np.abs(rho) < self.rho_floor):
            raise DomainException(f"ρ sous le plancher {self.rho_floor} sur le segment d'intégration",
                                  code='DIVISION_GUARD', value=float(np.min(np.abs(rho))))
        return u(t, y) / rho

    def _integral(self, u, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        y = x[..., None] * self.nodes
        vals = self._ratio(u, t[..., None], y)
        return x * integrate.simpson(vals, x=self.nodes, axis=-1)

    def A(self, t, x):
        return self._integral(self.strategy.u0, t, x)

    def B(self, t, x):
        return self._integral(self.strategy.u1, t, x)

    def A_x(self, t, x):
        return self._ratio(self.strategy.u0, t, x)

    def B_x(self, t, x):
        return self._ratio(self.strategy.u1, t, x)

    def A_xx(self, t, x):
        return central_difference(lambda y: self.A_x(t, y), x, self.step)

    def B_xx(self, t, x):
        return central_difference(lambda y: self.B_x(t, y), x, self.step)

    def A_t(self, t, x):
        return central_difference(lambda s: self.A(s, x), t, self.step)

    def B_t(self, t, x):
        return central_difference(lambda s: self.B(s, x), t, self.step)

    def tabulate(self, t_axis, x_axis) -> 'ABFields':
        """Remplit A_field et B_field sur la grille (t, x)"""
        tt, xx = np.meshgrid(t_axis, x_axis, indexing='ij')
        self.A_field = GridField((t_axis, x_axis), self.A(tt, xx), ('t', 'x'))
        self.B_field = GridField((t_axis, x_axis), self.B(tt, xx), ('t', 'x'))
        return self


def build_AB(strategy: AffineStrategy, coeffs: CoefficientSet, t_axis, x_axis, n_quad: int = 64) -> ABFields:
    """
    Construit les champs A et B sur une grille (t, x)

    Args:
        strategy: Stratégie affine (u0, u1)
        coeffs: Jeu de coefficients (pour ρ)
        t_axis: Axe des temps
        x_axis: Axe des x
        n_quad: Nombre d'intervalles de Simpson (pair)

    Returns:
        ABFields tabulés
    """
    return ABFields(strategy, coeffs, n_quad).tabulate(np.asarray(t_axis, dtype=float), np.asarray(x_axis, dtype=float))


# ---------------------------------------------------------------------------
# Résidu de compatibilité
# ---------------------------------------------------------------------------

@dataclass
class CompatibilityReport:
    """Termes I₀, I₁, I₂, G et résidu R = I₂v² + I₁v + I₀ + G sur la grille de sondage"""

    I0: np.ndarray
    I1: np.ndarray
    I2: np.ndarray
    G: np.ndarray
    residual: np.ndarray
    max_residual: float
    l2_residual: float
    max_G_vvv: float
    cubic_vanishes: bool
    tolerance: float
    probe: ProbeGrid = field(repr=False, default=None)

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'tolerance': self.tolerance,
            'max_residual': self.max_residual,
            'l2_residual': self.l2_residual,
            'terms': {name: {'max': float(np.max(np.abs(arr))), 'l2': float(np.sqrt(np.mean(arr ** 2)))}
                      for name, arr in (('I0', self.I0), ('I1', self.I1), ('I2', self.I2), ('G', self.G))},
            'max_G_vvv': self.max_G_vvv,
            'cubic_vanishes': self.cubic_vanishes,
            'probe': {axis: [float(getattr(self.probe, axis)[0]), float(getattr(self.probe, axis)[-1]),
                             len(getattr(self.probe, axis))] for axis in ('t', 'v', 'x')} if self.probe else None,
        }


def _i_terms(ab: ABFields, coeffs: CoefficientSet, t, x):
    mu = coeffs.eval_mu(t, x)
    rho2 = coeffs.eval_rho(t, x) ** 2
    A_x, B_x = ab.A_x(t, x), ab.B_x(t, x)
    I0 = ab.A_t(t, x) + mu * A_x + 0.5 * rho2 * (ab.A_xx(t, x) + A_x ** 2)
    I1 = ab.B_t(t, x) + mu * B_x + 0.5 * rho2 * ab.B_xx(t, x) + rho2 * A_x * B_x
    I2 = 0.5 * rho2 * B_x ** 2
    return I0, I1, I2


def _g_term(ab: ABFields, coeffs: CoefficientSet, h: HFunction, t, v, x):
    shift = h.dv(t, v) + ab.B(t, x)
    return (h.dt(t, v) + coeffs.eval_b(t, v, x) * shift
            + 0.5 * coeffs.eval_sigma(t, v, x) ** 2 * (h.dvv(t, v) + shift ** 2))


def compatibility_residual(strategy: AffineStrategy, coeffs: CoefficientSet, h_field: HFunction,
                           probe: ProbeGrid, tolerance: float = 1e-6, n_quad: int = 64,
                           v_step: float = 0.1) -> CompatibilityReport:
    """
    Évalue le système de compatibilité de la structure affine

    Args:
        strategy: Stratégie affine
        coeffs: Jeu de coefficients
        h_field: Fonction h(t, v)
        probe: Grille de sondage (t, v, x)
        tolerance: Seuil sur max |R|
        n_quad: Intervalles de Simpson pour A et B
        v_step: Pas de la différence troisième en v

    Returns:
        CompatibilityReport
    """
    ab = ABFields(strategy, coeffs, n_quad)
    tt, vv, xx = probe.mesh()
    I0, I1, I2 = _i_terms(ab, coeffs, tt[:, :1, :], xx[:, :1, :])
    G = _g_term(ab, coeffs, h_field, tt, vv, xx)
    R = I2 * vv ** 2 + I1 * vv + I0 + G
    g_vvv = central_difference(lambda w: _g_term(ab, coeffs, h_field, tt, w, xx), vv, v_step, order=3)
    max_vvv = float(np.max(np.abs(g_vvv)))

    report = CompatibilityReport(
        I0=I0[:, 0, :], I1=I1[:, 0, :], I2=I2[:, 0, :], G=G, residual=R,
        max_residual=float(np.max(np.abs(R))), l2_residual=float(np.sqrt(np.mean(R ** 2))),
        max_G_vvv=max_vvv, cubic_vanishes=max_vvv <= 1e-4, tolerance=tolerance, probe=probe)
    current_app.logger.info(
        f"📊 Compatibilité affine ({strategy.name}): max |R| = {report.max_residual:.3e}")
    return report


# ---------------------------------------------------------------------------
# Cas particuliers
# ---------------------------------------------------------------------------

# Degrés maximaux en v de (b, σ, h) par cas
CASE_SHAPES = {
    1: (0, 0, 0),
    2: (1, 1, 0),
    3: (2, 1, 0),
    4: (2, 1, 1),
    5: (1, 0, 2),
}

V_SAMPLES = np.array([-2.0, -1.0, 0.0, 1.0, 2.0, 3.0])


def _v_coefficients(fn, tt, xx, degree: int = 4):
    """Coefficients polynomiaux en v (ordre croissant) aux points (t, x)"""
    vals = np.stack([fn(tt, np.full(tt.shape, v), xx) for v in V_SAMPLES], axis=0)
    flat = vals.reshape(len(V_SAMPLES), -1)
    coefs = P.polyfit(V_SAMPLES, flat, degree)
    return coefs.reshape((degree + 1,) + tt.shape)


def _v_degree(coefs, tol) -> int:
    scale = max(1.0, float(np.max(np.abs(coefs))))
    nonzero = [i for i in range(coefs.shape[0]) if np.max(np.abs(coefs[i])) > tol * scale]
    return max(nonzero, default=0)


def case_check(case_id: int, strategy: AffineStrategy, coeffs: CoefficientSet, h_spec: HFunction,
               probe: ProbeGrid, x_base: float = 0.0, tolerance: float = 1e-6, shape_tol: float = 1e-8,
               n_quad: int = 64) -> Dict:
    """
    Système réduit d'un cas particulier (1 à 5)

    Args:
        case_id: Numéro du cas
        strategy: Stratégie affine
        coeffs: Jeu de coefficients
        h_spec: Fonction h(t, v)
        probe: Grille de sondage
        x_base: Borne inférieure x₀ de l'intégrale du cas 3

    Returns:
        Rapport par cas (résidus maximaux, verdict, motif d'échec)
    """
    if case_id not in CASE_SHAPES:
        raise ValidationException(f"Cas inconnu: {case_id}", code='INVALID_ARGUMENT', field='case_id')
    max_b, max_sigma, max_h = CASE_SHAPES[case_id]
    tt, xx = probe.mesh_tx()

    b_coefs = _v_coefficients(coeffs.eval_b, tt, xx)
    s_coefs = _v_coefficients(coeffs.eval_sigma, tt, xx)
    h_coefs = _v_coefficients(lambda t, v, x: np.broadcast_to(h_spec(t, v), np.shape(x)), tt, xx)
    degrees = {'b': _v_degree(b_coefs, shape_tol), 'sigma': _v_degree(s_coefs, shape_tol),
               'h': _v_degree(h_coefs, shape_tol)}
    for name, limit in zip(('b', 'sigma', 'h'), (max_b, max_sigma, max_h)):
        if degrees[name] > limit:
            dependence = f"{name} de degré {degrees[name]} en v"
            if case_id == 5 and name == 'sigma':
                raise ShapeException("Le cas 5 impose σ(t, v, x) indépendant de v", dependence=dependence)
            raise ShapeException(f"Forme incompatible avec le cas {case_id}: {dependence} (max {limit})",
                                 dependence=dependence)

    ab = ABFields(strategy, coeffs, n_quad)

    def full_residual(t, v, x):
        I0, I1, I2 = _i_terms(ab, coeffs, t, x)
        return I2 * v ** 2 + I1 * v + I0 + _g_term(ab, coeffs, h_spec, t, v, x)

    r_coefs = _v_coefficients(full_residual, tt, xx, degree=2)
    systems = {f'I{k}': float(np.max(np.abs(r_coefs[k]))) for k in range(3)}
    report = {'case': case_id, 'degrees': degrees, 'systems': systems, 'failures': []}

    u1 = np.asarray(strategy.u1(tt, xx), dtype=float)
    if case_id in (1, 2):
        if np.max(np.abs(u1)) > tolerance:
            report['failures'].append(f"Le cas {case_id} impose u1 ≡ 0 (max |u1| = {np.max(np.abs(u1)):.3g})")
        report['intercept_residual'] = systems['I0']

    if case_id == 3:
        rho = coeffs.eval_rho(tt, xx)
        u1_over_rho = lambda t, y: np.asarray(strategy.u1(t, y)) / coeffs.eval_rho(t, y)
        nodes = ab.nodes
        seg = x_base + (xx[..., None] - x_base) * nodes
        b_tilde = (xx - x_base) * integrate.simpson(u1_over_rho(tt[..., None], seg), x=nodes, axis=-1)
        sigma1, b2 = s_coefs[1], b_coefs[2]
        u1_square = u1 ** 2 + sigma1 ** 2 * b_tilde ** 2 + 2.0 * b2 * b_tilde
        report['u1_square_residual'] = float(np.max(np.abs(u1_square)))

        B = ab.B(tt, xx)
        bracket = (-ab.B_t(tt, xx) - coeffs.eval_mu(tt, xx) * ab.B_x(tt, xx) - 0.5 * rho ** 2 * ab.B_xx(tt, xx)
                   - b_coefs[1] * B - s_coefs[0] * sigma1 * B ** 2)
        safe = np.abs(u1) > tolerance
        u0_pred = np.where(safe, bracket / np.where(safe, u1, 1.0), np.nan)
        gap = np.abs(u0_pred - np.asarray(strategy.u0(tt, xx), dtype=float))
        report['u0_from_I1_gap'] = float(np.nanmax(gap)) if safe.any() else None
        if report['u1_square_residual'] > tolerance:
            report['failures'].append(f"Relation sur u1² violée ({report['u1_square_residual']:.3g})")

    if case_id in (4, 5):
        report['validated_on_degenerate_inputs_only'] = True

    for name, value in systems.items():
        if value > tolerance:
            report['failures'].append(f"{name} non nul ({value:.3g})")
    report['passed'] = not report['failures']
    log = current_app.logger
    if report['passed']:
        log.info(f"✅ Cas {case_id} vérifié")
    else:
        log.warning(f"⚠️ Cas {case_id}: {'; '.join(report['failures'])}")
    return report


# ---------------------------------------------------------------------------
# Riccati et modèle linéaire de référence
# ---------------------------------------------------------------------------

@dataclass
class RiccatiSolution:
    """Solution S(t) de dS/dt = 2fS - β²S² + ε"""

    field: GridField
    blow_up_time: Optional[float]
    ok: bool
    forcing: float
    f: Callable = None
    beta: Callable = None

    def __call__(self, t):
        return self.field(t)

    def derivative(self, t):
        S = self(t)
        t = np.asarray(t, dtype=float)
        f = np.vectorize(self.f, otypes=[float])(t)
        b = np.vectorize(self.beta, otypes=[float])(t)
        return 2.0 * f * S - b ** 2 * S ** 2 + self.forcing


def riccati_solve(f, beta, S0: float, grid: TimeGrid, forcing: float = 1.0,
                  s_max: Optional[float] = None) -> RiccatiSolution:
    """
    Intègre l'équation de Riccati par RK4 avec détection d'explosion

    Args:
        f: f(t) ou constante
        beta: β(t) ou constante
        S0: Valeur initiale (S0 ≥ 0)
        grid: Grille de temps
        forcing: Terme constant ε (+1 par défaut)
        s_max: Borne supérieure (configuration par défaut)

    Returns:
        RiccatiSolution
    """
    if S0 < 0:
        raise ValidationException("S0 doit être positif ou nul", code='INVALID_ARGUMENT', field='S0')
    cap = setting('RICCATI_S_MAX', s_max)
    f, beta = _as_time_function(f), _as_time_function(beta)

    def rhs(t, s):
        return 2.0 * f(t) * s - beta(t) ** 2 * s ** 2 + forcing

    def escaped(t, s):
        return not np.isfinite(s) or s < 0.0 or s > cap

    nodes = grid.nodes
    path, stop = rk4_path(rhs, float(S0), nodes, stop=escaped)
    if stop is None:
        field = GridField((nodes,), path, ('t',))
        return RiccatiSolution(field, None, True, forcing, f, beta)

    blow_up = float(nodes[stop])
    keep = max(stop, 2)
    field = GridField((nodes[:keep],), np.nan_to_num(path[:keep]), ('t',))
    current_app.logger.warning(f"⚠️ Riccati: S quitte [0, {cap:g}] à t = {blow_up:.6g}")
    return RiccatiSolution(field, blow_up, False, forcing, f, beta)


@dataclass
class LinearModel:
    """Scénario linéaire-gaussien entièrement câblé"""

    coeffs: CoefficientSet
    strategy: AffineStrategy
    riccati: RiccatiSolution
    h: HFunction
    S: Callable
    beta: Callable


def linear_reference_model(f, g_fun, k, beta, S0: float, T: float = 1.0, v0: float = 0.0, x0: float = 0.0,
                           m_star: Optional[TerminalLaw] = None, forcing: float = 1.0, n_steps: int = 2000,
                           s_scale: float = 1.0, delta: Optional[float] = None) -> LinearModel:
    """
    Modèle b = f v + g x + k, σ = 1, μ = (f + g) x + k, ρ = S β, u0 = -β x, u1 = β

    Args:
        f, g_fun, k, beta: Fonctions du temps (ou constantes)
        S0: Valeur initiale de la Riccati
        T: Horizon
        m_star: Loi terminale (par défaut la loi gaussienne de V_T)
        forcing: Terme constant ε de la Riccati
        n_steps: Pas de RK4
        s_scale: Facteur appliqué à S (perturbation)
        delta: Garde temporelle (T * TIME_GUARD_FRACTION par défaut)

    Returns:
        LinearModel
    """
    f, g_fun, k, beta = (_as_time_function(a) for a in (f, g_fun, k, beta))
    guard = delta if delta is not None else T * current_app.config['TIME_GUARD_FRACTION']
    riccati = riccati_solve(f, beta, S0, TimeGrid(0.0, T, n_steps), forcing=forcing)
    if not riccati.ok and riccati.blow_up_time < T - guard:
        raise SolverDivergedException(
            f"Explosion de la Riccati à t = {riccati.blow_up_time:.6g} < T - δ", time_slice=riccati.blow_up_time)

    vec = lambda fn: (lambda t: np.vectorize(fn, otypes=[float])(np.asarray(t, dtype=float)))
    fv, gv, kv, bv = vec(f), vec(g_fun), vec(k), vec(beta)
    S = lambda t: s_scale * riccati(t)
    dS = lambda t: s_scale * riccati.derivative(t)

    def rho(t, x):
        return S(t) * bv(t) * np.ones(np.broadcast_shapes(np.shape(t), np.shape(x)))

    linear = LinearStructure(f=f, g=g_fun, k=k, sigma=lambda t: 1.0, mu1=lambda t: f(t) + g_fun(t), mu0=k,
                             rho=lambda t: float(S(t) * beta(t)))
    if m_star is None:
        from .conditioning import transition_moments

        mats, psi, cov = transition_moments(linear, 0.0, T)
        m_star = TerminalLaw.gaussian(float(mats[0] @ np.array([v0, x0]) + psi[0]), float(cov[0, 0]))

    coeffs = CoefficientSet(
        b=lambda t, v, x: fv(t) * np.asarray(v) + gv(t) * np.asarray(x) + kv(t),
        sigma=lambda t, v, x: np.ones(np.broadcast_shapes(np.shape(v), np.shape(x))),
        mu=lambda t, x: (fv(t) + gv(t)) * np.asarray(x) + kv(t),
        rho=rho,
        g=lambda x: np.asarray(x, dtype=float),
        m_star=m_star, v0=v0, x0=x0, T=T, name='linear', linear=linear,
        metadata={'forcing': forcing, 'S0': S0, 's_scale': s_scale})
    strategy = AffineStrategy(lambda t, x: -bv(t) * np.asarray(x, dtype=float),
                              lambda t, x: bv(t) * np.ones(np.shape(x)), name='linear')

    floor = current_app.config['RHO_FLOOR']

    def inv_S(t):
        s = np.asarray(S(t), dtype=float)
        if np.any(np.abs(s) <= floor):
            raise DomainException(
                f"h n'est définie que là où S(t) ≠ 0 (S0 = {S0:g}); évaluer sur ]0, T - δ]",
                value=float(np.min(t)))
        return 1.0 / s

    # h = -v²/(2S) + d(t) avec d' = β²S/2 + 1/(2S); d n'intervient que par sa dérivée
    d_prime = lambda t: 0.5 * bv(t) ** 2 * S(t) + 0.5 * inv_S(t)
    h = HFunction(lambda t, v: -0.5 * np.asarray(v) ** 2 * inv_S(t),
                  dt=lambda t, v: 0.5 * np.asarray(v) ** 2 * dS(t) * inv_S(t) ** 2 + d_prime(t),
                  dv=lambda t, v: -np.asarray(v) * inv_S(t),
                  dvv=lambda t, v: -np.ones(np.shape(v)) * inv_S(t),
                  degree=2, name='linear')
    current_app.logger.info(f"✅ Modèle linéaire câblé (ε = {forcing:+g}, S0 = {S0:g})")
    return LinearModel(coeffs, strategy, riccati, h, S, bv)
