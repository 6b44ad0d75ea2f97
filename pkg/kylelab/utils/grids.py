"""
Grilles temporelles, champs tabulés et différences finies centrées
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .exceptions import ConfigurationException, ValidationException


@dataclass(frozen=True)
class TimeGrid:
    """Grille uniforme t_start = t_0 < ... < t_N = t_end"""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValidationException("n_steps doit être au moins 1", field='n_steps')
        if not self.t_end > self.t_start:
            raise ValidationException("t_end doit être strictement supérieur à t_start", field='t_end')

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    @classmethod
    def for_bridge(cls, horizon: float, n_steps: int, delta: float) -> 'TimeGrid':
        """Grille [0, T - delta] utilisée par les ponts"""
        if not 0.0 < delta < horizon / 10.0:
            raise ConfigurationException(
                f"delta={delta} hors de ]0, T/10[ pour T={horizon}", setting='delta')
        return cls(0.0, horizon - delta, n_steps)

    def refine(self, factor: int = 2) -> 'TimeGrid':
        return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)


@dataclass
class GridField:
    """
    Valeurs tabulées sur un produit cartésien d'axes

    Args:
        axes: Axes 1-D strictement croissants (par ex. (t, x) ou (t, v, x))
        values: Tableau de forme (len(axes[0]), len(axes[1]), ...)
        names: Noms des axes, utilisés pour l'export
        method: 'linear' ou 'cubic'
    """

    axes: Tuple[np.ndarray, ...]
    values: np.ndarray
    names: Tuple[str, ...] = ('t', 'x')
    method: str = 'cubic'
    _interp: Optional[object] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        expected = tuple(len(a) for a in self.axes)
        if self.values.shape != expected:
            raise ValidationException(
                f"Forme des valeurs {self.values.shape} incompatible avec les axes {expected}")
        if len(self.names) != len(self.axes):
            raise ValidationException("Un nom par axe est requis", field='names')

    @property
    def bounds(self):
        return [(a[0], a[-1]) for a in self.axes]

    def _interpolator(self):
        if self._interp is None:
            method = self.method
            if method == 'cubic' and min(len(a) for a in self.axes) < 4:
                method = 'linear'
            if len(self.axes) == 1:
                if method == 'cubic':
                    self._interp = CubicSpline(self.axes[0], self.values, extrapolate=True)
                else:
                    axis, vals = self.axes[0], self.values
                    self._interp = lambda q: np.interp(q, axis, vals)
            else:
                self._interp = RegularGridInterpolator(
                    self.axes, self.values, method=method, bounds_error=False, fill_value=None)
        return self._interp

    def __call__(self, *coords):
        """Évalue le champ (extrapolation linéaire hors domaine)"""
        arrays = np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in coords])
        shape = arrays[0].shape
        interp = self._interpolator()
        if len(self.axes) == 1:
            return np.asarray(interp(arrays[0].ravel())).reshape(shape)
        points = np.stack([a.ravel() for a in arrays], axis=-1)
        return np.asarray(interp(points)).reshape(shape)

    def coverage(self, *coords) -> float:
        """Fraction des points situés hors du domaine tabulé"""
        arrays = np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in coords])
        outside = np.zeros(arrays[0].shape, dtype=bool)
        for arr, (lo, hi) in zip(arrays, self.bounds):
            outside |= (arr < lo) | (arr > hi)
        return float(outside.mean()) if outside.size else 0.0

    def gradient(self, axis: int, order: int = 1) -> 'GridField':
        """Champ des dérivées partielles (différences centrées d'ordre 2)"""
        values = self.values
        for _ in range(order):
            values = np.gradient(values, self.axes[axis], axis=axis, edge_order=2)
        return GridField(self.axes, values, self.names, self.method)

    def slice_at(self, axis: int, index: int) -> 'GridField':
        axes = tuple(a for i, a in enumerate(self.axes) if i != axis)
        names = tuple(n for i, n in enumerate(self.names) if i != axis)
        return GridField(axes, np.take(self.values, index, axis=axis), names, self.method)

    def to_frame(self, value_name: str = 'value') -> pd.DataFrame:
        """Format long: une colonne par axe puis la valeur"""
        mesh = np.meshgrid(*self.axes, indexing='ij')
        data = {name: m.ravel() for name, m in zip(self.names, mesh)}
        data[value_name] = self.values.ravel()
        return pd.DataFrame(data)


@dataclass(frozen=True)
class ProbeGrid:
    """Grille de sondage (t, v, x) pour les diagnostics"""

    t: np.ndarray
    v: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        for name in ('t', 'v', 'x'):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or arr.size < 2:
                raise ValidationException(f"L'axe {name} doit contenir au moins 2 nœuds", field=name)
            object.__setattr__(self, name, arr)

    @classmethod
    def rectangle(cls, t_range, v_range, x_range, n: int = 9, n_t: Optional[int] = None) -> 'ProbeGrid':
        return cls(np.linspace(*t_range, n_t or n), np.linspace(*v_range, n), np.linspace(*x_range, n))

    def mesh(self):
        return np.meshgrid(self.t, self.v, self.x, indexing='ij')

    def mesh_tx(self):
        return np.meshgrid(self.t, self.x, indexing='ij')


def central_difference(fn: Callable, x, h: float, order: int = 1, richardson: bool = True):
    """
    Différence centrée, extrapolée de Richardson par défaut

    Args:
        fn: Fonction vectorisée d'une variable
        x: Points d'évaluation
        h: Pas
        order: Ordre de dérivation (1, 2 ou 3)
        richardson: Combine les pas h et h/2

    Returns:
        Approximation de la dérivée
    """
    x = np.asarray(x, dtype=float)

    def raw(step):
        if order == 1:
            return (fn(x + step) - fn(x - step)) / (2.0 * step)
        if order == 2:
            return (fn(x + step) - 2.0 * fn(x) + fn(x - step)) / step ** 2
        if order == 3:
            return (fn(x + 2 * step) - 2.0 * fn(x + step) + 2.0 * fn(x - step)
                    - fn(x - 2 * step)) / (2.0 * step ** 3)
        raise ValidationException(f"Ordre de dérivation non supporté: {order}", field='order')

    if not richardson:
        return raw(h)
    return (4.0 * raw(h / 2.0) - raw(h)) / 3.0


def stencil_derivative(values: np.ndarray, spacing: float, axis: int, order: int = 1) -> np.ndarray:
    """
    Dérivée d'ordre 4 sur nœuds intérieurs (deux nœuds de bord mis à NaN)
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    out = np.full_like(v, np.nan)
    if order == 1:
        out[2:-2] = (-v[4:] + 8 * v[3:-1] - 8 * v[1:-3] + v[:-4]) / (12.0 * spacing)
    elif order == 2:
        out[2:-2] = (-v[4:] + 16 * v[3:-1] - 30 * v[2:-2] + 16 * v[1:-3] - v[:-4]) / (12.0 * spacing ** 2)
    else:
        raise ValidationException(f"Ordre de stencil non supporté: {order}", field='order')
    return np.moveaxis(out, 0, axis)


def uniform_axis(lo: float, hi: float, step: float) -> np.ndarray:
    """Axe uniforme couvrant [lo, hi] avec un pas au plus égal à step"""
    if not hi > lo or step <= 0:
        raise ValidationException(f"Axe invalide [{lo}, {hi}] pas {step}")
    n = int(np.ceil((hi - lo) / step - 1e-9))
    return np.linspace(lo, hi, n + 1)


def inner_mask(axis_values: Sequence[float], fraction: float = 0.5) -> np.ndarray:
    """Masque de la partie centrale d'un axe (fraction de la longueur)"""
    a = np.asarray(axis_values, dtype=float)
    center, half = 0.5 * (a[0] + a[-1]), 0.5 * fraction * (a[-1] - a[0])
    return (a >= center - half - 1e-12) & (a <= center + half + 1e-12)
