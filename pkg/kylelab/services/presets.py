"""
Préréglages de coefficients, applications g et lois terminales
"""

from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ConfigurationException, ValidationException
from .sde_core import CoefficientSet, LinearStructure, TerminalLaw


def constant(value: float):
    """Fonction constante de n'importe quels arguments"""
    return lambda *args: float(value)


# Applications terminales g (strictement croissantes)
G_MAPS = {
    'identity': lambda p: (lambda x: np.asarray(x, dtype=float)),
    'affine': lambda p: (lambda x: p.get('slope', 1.0) * np.asarray(x, dtype=float) + p.get('intercept', 0.0)),
    'cubic': lambda p: (lambda x: np.asarray(x, dtype=float) ** 3 + np.asarray(x, dtype=float)),
    'exp': lambda p: (lambda x: np.exp(np.asarray(x, dtype=float))),
}


def g_map(kind: str = 'identity', **params):
    try:
        factory = G_MAPS[kind]
    except KeyError:
        raise ConfigurationException(f"Application g inconnue: {kind}", setting='g_map')
    if kind == 'affine' and params.get('slope', 1.0) <= 0:
        raise ValidationException("La pente de g doit être strictement positive", field='slope')
    return factory(params)


def terminal_law_from_dict(spec: Mapping) -> TerminalLaw:
    """Construit une loi terminale depuis sa description JSON"""
    kind = spec.get('kind')
    if kind == 'point_mass':
        return TerminalLaw.point_mass(float(spec['location']))
    if kind == 'gaussian':
        return TerminalLaw.gaussian(float(spec.get('mean', 0.0)), float(spec['variance']))
    if kind == 'mixture':
        return TerminalLaw.mixture([(c['weight'], c['mean'], c['variance']) for c in spec['components']])
    if kind == 'empirical':
        return TerminalLaw.empirical(spec['samples'])
    raise ConfigurationException(f"Type de loi terminale inconnu: {kind}", setting='terminal_law')


class PolynomialTable:
    """
    Polynôme Σ c_ij(t) vⁱ xʲ à coefficients tabulés en temps

    Args:
        terms: Dictionnaire 'i,j' -> constante ou liste de valeurs aux instants `times`
        times: Instants d'échantillonnage des coefficients (interpolation linéaire)
    """

    def __init__(self, terms: Mapping[str, object], times: Optional[Sequence[float]] = None):
        self.times = None if times is None else np.asarray(times, dtype=float)
        self.terms = []
        for key, value in terms.items():
            try:
                i, j = (int(p) for p in str(key).split(','))
            except ValueError:
                raise ValidationException(f"Terme polynomial invalide: {key}", field='terms')
            values = np.atleast_1d(np.asarray(value, dtype=float))
            if values.size > 1 and (self.times is None or values.size != self.times.size):
                raise ValidationException(f"Le terme {key} doit avoir une valeur par instant", field='terms')
            self.terms.append((i, j, values))

    def degree_in_v(self) -> int:
        return max((i for i, _, c in self.terms if np.any(c != 0)), default=0)

    def _coef(self, values, t):
        if values.size == 1:
            return values[0]
        return np.interp(t, self.times, values)

    def __call__(self, t, v, x):
        v = np.asarray(v, dtype=float)
        x = np.asarray(x, dtype=float)
        total = np.zeros(np.broadcast_shapes(v.shape, x.shape))
        for i, j, values in self.terms:
            total = total + self._coef(values, t) * v ** i * x ** j
        return total

    def of_tx(self, t, x):
        """Évaluation sans dépendance en v (pour mu et rho)"""
        return self(t, 0.0, x)


def brownian(T: float = 1.0, v0: float = 0.0, x0: float = 0.0, m_star: Optional[TerminalLaw] = None,
             g=None, sigma: float = 1.0, rho: float = 1.0, name: str = 'brownian') -> CoefficientSet:
    """b = mu = 0, sigma et rho constants"""
    law = m_star or TerminalLaw.gaussian(v0, sigma ** 2 * T)
    zero = constant(0.0)
    linear = LinearStructure(f=zero, g=zero, k=zero, sigma=constant(sigma), mu1=zero, mu0=zero, rho=constant(rho))
    return CoefficientSet(b=zero, sigma=constant(sigma), mu=zero, rho=constant(rho), g=g or g_map('identity'),
                          m_star=law, v0=v0, x0=x0, T=T, name=name, linear=linear)


def ornstein_uhlenbeck(kappa: float = 1.0, sigma: float = 1.0, T: float = 1.0, v0: float = 0.0, x0: float = 0.0,
                       m_star: Optional[TerminalLaw] = None, g=None, rho: float = 1.0) -> CoefficientSet:
    """b = -kappa v, V de type Ornstein-Uhlenbeck"""
    mean = v0 * np.exp(-kappa * T)
    var = sigma ** 2 * (1 - np.exp(-2 * kappa * T)) / (2 * kappa) if kappa else sigma ** 2 * T
    law = m_star or TerminalLaw.gaussian(mean, var)
    zero = constant(0.0)
    linear = LinearStructure(f=constant(-kappa), g=zero, k=zero, sigma=constant(sigma),
                             mu1=zero, mu0=zero, rho=constant(rho))
    return CoefficientSet(b=lambda t, v, x: -kappa * np.asarray(v, dtype=float), sigma=constant(sigma), mu=zero,
                          rho=constant(rho), g=g or g_map('identity'), m_star=law, v0=v0, x0=x0, T=T,
                          name='ou', linear=linear)


def polynomial(tables: Mapping[str, Mapping], T: float, m_star: TerminalLaw, g=None,
               v0: float = 0.0, x0: float = 0.0, times: Optional[Sequence[float]] = None) -> CoefficientSet:
    """Coefficients polynomiaux en (v, x) à coefficients tabulés en temps"""
    missing = [k for k in ('b', 'sigma', 'mu', 'rho') if k not in tables]
    if missing:
        raise ConfigurationException(f"Tables polynomiales manquantes: {missing}", setting='parameters')
    b, sigma = PolynomialTable(tables['b'], times), PolynomialTable(tables['sigma'], times)
    mu, rho = PolynomialTable(tables['mu'], times), PolynomialTable(tables['rho'], times)
    for name, table in (('mu', mu), ('rho', rho)):
        if table.degree_in_v() > 0:
            raise ValidationException(f"{name} ne peut pas dépendre de v", field=name)
    return CoefficientSet(b=b, sigma=sigma, mu=mu.of_tx, rho=rho.of_tx, g=g or g_map('identity'),
                          m_star=m_star, v0=v0, x0=x0, T=T, name='polynomial')


PRESETS = ('brownian', 'linear', 'ou', 'polynomial')


def build_preset(preset: str, parameters: Dict, m_star: Optional[TerminalLaw], g, T: float,
                 v0: float, x0: float) -> Tuple[CoefficientSet, Optional[object]]:
    """
    Construit le jeu de coefficients d'un préréglage nommé

    Returns:
        Tuple (CoefficientSet, stratégie affine associée ou None)
    """
    params = dict(parameters or {})
    if preset == 'brownian':
        return brownian(T=T, v0=v0, x0=x0, m_star=m_star, g=g,
                        sigma=params.get('sigma', 1.0), rho=params.get('rho', 1.0)), None
    if preset == 'ou':
        return ornstein_uhlenbeck(kappa=params.get('kappa', 1.0), sigma=params.get('sigma', 1.0), T=T,
                                  v0=v0, x0=x0, m_star=m_star, g=g, rho=params.get('rho', 1.0)), None
    if preset == 'linear':
        from .affine import linear_reference_model

        model = linear_reference_model(
            f=constant(params.get('f', 0.0)), g_fun=constant(params.get('g', 0.0)),
            k=constant(params.get('k', 0.0)), beta=constant(params.get('beta', 1.0)),
            S0=params.get('S0', 0.0), T=T, v0=v0, x0=x0, m_star=m_star,
            forcing=params.get('forcing', 1.0), n_steps=int(params.get('riccati_steps', 2000)))
        model.coeffs.metadata.update({'h': model.h, 'beta': model.beta})
        return model.coeffs, model.strategy
    if preset == 'polynomial':
        return polynomial(params.get('tables', {}), T=T, m_star=m_star, g=g, v0=v0, x0=x0,
                          times=params.get('times')), None
    raise ConfigurationException(f"Préréglage inconnu: {preset}", setting='preset')
