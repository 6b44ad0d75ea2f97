"""
Service de conditionnement (h-transformée de Doob)

Densités de transition de ξ = (V, X) sous la mesure de référence, mesure ν
sur le graphe de g, fonction φ et dérive du pont θ.
"""

import weakref
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from flask import current_app
import numpy as np
from scipy import integrate, stats
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.special import logsumexp, softmax

from ..context import setting
from ..utils.exceptions import (
    ConfigurationException, DegeneratePhiException, DomainException, ImproperConditioningException,
    InsufficientSampleException, SingularCovarianceException, ValidationException
)
from ..utils.fd import backward_coefficients, douglas_step, forward_coefficients, scheme_theta
from ..utils.grids import ProbeGrid, TimeGrid, central_difference, stencil_derivative
from ..utils.odes import rk4_path
from .sde_core import CoefficientSet, LinearStructure, PathBundle, TerminalLaw, g_inverse, simulate_reference

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Noyau gaussien (modèles linéaires)
# ---------------------------------------------------------------------------

def _linear_structure(coeffs) -> LinearStructure:
    linear = coeffs if isinstance(coeffs, LinearStructure) else getattr(coeffs, 'linear', None)
    if linear is None:
        raise ValidationException("Le backend gaussien requiert des coefficients linéaires", field='linear')
    return linear


def _moment_rhs(linear: LinearStructure):
    def rhs(t, y):
        phi = y[:4].reshape(2, 2)
        cov = y[6:].reshape(2, 2)
        m = linear.drift_matrix(t)
        d = linear.diffusion_diag(t)
        dphi = m @ phi
        dpsi = m @ y[4:6] + linear.drift_constant(t)
        dcov = m @ cov + cov @ m.T + np.diag(d ** 2)
        return np.concatenate([dphi.ravel(), dpsi, dcov.ravel()])
    return rhs


def transition_moments(linear: LinearStructure, s: float, t: float, n_steps: Optional[int] = None):
    """
    Propagateurs des moments entre s et t (RK4 sur les EDO des moments)

    Returns:
        Tuple (Phi, psi, C) tels que ξ_t | ξ_s = z ~ N(Phi z + psi, C)
    """
    if not t > s:
        raise ValidationException("La densité de transition requiert t > s", field='t')
    n = n_steps or max(64, int(np.ceil((t - s) / 1e-3)))
    y0 = np.concatenate([np.eye(2).ravel(), np.zeros(2), np.zeros(4)])
    path, _ = rk4_path(_moment_rhs(linear), y0, np.linspace(s, t, n + 1))
    y = path[-1]
    return y[:4].reshape(2, 2), y[4:6], y[6:].reshape(2, 2)


def _gaussian_logpdf(mean, cov, y, det_floor):
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det < det_floor:
        raise SingularCovarianceException(f"Déterminant de covariance {det:.3e} < {det_floor}", determinant=det)
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    r = np.asarray(y, dtype=float) - mean
    q = np.einsum('...i,ij,...j->...', r, inv, r)
    return -0.5 * q - LOG_2PI - 0.5 * np.log(det)


def gaussian_density(linear_coeffs, s: float, z, t: float, y, det_floor: Optional[float] = None):
    """
    Densité de transition p(s, z; t, y) d'un modèle linéaire

    Args:
        linear_coeffs: CoefficientSet à structure linéaire (ou LinearStructure)
        s: Instant initial
        z: État initial (..., 2)
        t: Instant final (t > s)
        y: État final (..., 2)

    Returns:
        Densité (forme diffusée de z et y)
    """
    floor = setting('DET_FLOOR', det_floor)
    phi, psi, cov = transition_moments(_linear_structure(linear_coeffs), s, t)
    mean = np.einsum('ij,...j->...i', phi, np.asarray(z, dtype=float)) + psi
    return np.exp(_gaussian_logpdf(mean, cov, y, floor))


class GaussianKernel:
    """
    Propagateurs (Phi(t,T), psi(t,T), C(t,T)) tabulés en t par RK4 rétrograde
    """

    def __init__(self, linear: LinearStructure, T: float, n_steps: Optional[int] = None):
        self.T = T
        n = int(setting('KERNEL_TABLE_STEPS', n_steps))
        nodes = np.linspace(T, 0.0, n + 1)

        def rhs(t, y):
            phi = y[:4].reshape(2, 2)
            d = linear.diffusion_diag(t)
            dphi = -phi @ linear.drift_matrix(t)
            dpsi = -phi @ linear.drift_constant(t)
            dcov = -phi @ np.diag(d ** 2) @ phi.T
            return np.concatenate([dphi.ravel(), dpsi, dcov.ravel()])

        y0 = np.concatenate([np.eye(2).ravel(), np.zeros(2), np.zeros(4)])
        path, _ = rk4_path(rhs, y0, nodes)
        self._spline = CubicSpline(nodes[::-1], path[::-1], axis=0)

    def matrices(self, t):
        t = np.asarray(t, dtype=float)
        vals = self._spline(t)
        return vals[..., :4].reshape(t.shape + (2, 2)), vals[..., 4:6], vals[..., 6:].reshape(t.shape + (2, 2))


# ---------------------------------------------------------------------------
# Modèles de densité
# ---------------------------------------------------------------------------

class DensityModel:
    """Interface commune des backends de densité"""

    backend = 'abstract'
    supports_transitions = False

    def evaluate(self, s, z, t, y):
        raise NotImplementedError


class GaussianDensityModel(DensityModel):
    """Backend en forme close pour les modèles linéaires"""

    backend = 'closed_form_gaussian'
    supports_transitions = True

    def __init__(self, coeffs: CoefficientSet):
        self.coeffs = coeffs
        self.linear = _linear_structure(coeffs)
        self._kernel = None

    @property
    def kernel(self) -> GaussianKernel:
        if self._kernel is None:
            self._kernel = GaussianKernel(self.linear, self.coeffs.T)
        return self._kernel

    def evaluate(self, s, z, t, y):
        return gaussian_density(self.linear, s, z, t, y)


class FokkerPlanckDensity(DensityModel):
    """Piles temporelles de p(0, ξ0; t, ·) sur une grille (v, x)"""

    backend = 'fokker_planck_grid'

    def __init__(self, coeffs, v_axis, x_axis, times, slices, time_grid):
        self.coeffs = coeffs
        self.v_axis = np.asarray(v_axis, dtype=float)
        self.x_axis = np.asarray(x_axis, dtype=float)
        self.times = np.asarray(times, dtype=float)
        self.slices = np.asarray(slices, dtype=float)
        self.time_grid = time_grid

    def _check_origin(self, s, z):
        if abs(s) > 1e-12 or not np.allclose(np.asarray(z, dtype=float), self.coeffs.xi0, atol=1e-12):
            raise ValidationException("Le backend Fokker-Planck ne fournit que p(0, ξ0; t, ·)", field='z')

    def slice_at(self, t: float) -> np.ndarray:
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ValidationException(f"t={t} hors de la pile temporelle", field='t')
        k = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2))
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.slices[k] + w * self.slices[k + 1]

    def evaluate(self, s, z, t, y):
        self._check_origin(s, z)
        interp = RegularGridInterpolator((self.v_axis, self.x_axis), self.slice_at(t),
                                         bounds_error=False, fill_value=0.0)
        y = np.asarray(y, dtype=float)
        return np.maximum(interp(y.reshape(-1, 2)).reshape(y.shape[:-1]), 0.0)

    def mass(self, t: float) -> float:
        return float(integrate.trapezoid(integrate.trapezoid(self.slice_at(t), self.x_axis, axis=1), self.v_axis))


class KernelDensity(DensityModel):
    """Nuages de trajectoires de référence lissés par noyau gaussien"""

    backend = 'kernel_mc'

    def __init__(self, coeffs, times, clouds, bandwidth=None):
        self.coeffs = coeffs
        self.times = np.asarray(times, dtype=float)
        self.kdes = [stats.gaussian_kde(cloud.T, bw_method=bandwidth) for cloud in clouds]

    def evaluate(self, s, z, t, y):
        if abs(s) > 1e-12 or not np.allclose(np.asarray(z, dtype=float), self.coeffs.xi0, atol=1e-12):
            raise ValidationException("Le backend kernel_mc ne fournit que p(0, ξ0; t, ·)", field='z')
        k = int(np.argmin(np.abs(self.times - t)))
        y = np.asarray(y, dtype=float)
        return self.kdes[k](y.reshape(-1, 2).T).reshape(y.shape[:-1])


def _initial_layer(coeffs: CoefficientSet, vv, xx, t0: float):
    """Densité au premier instant stocké (gaussienne exacte si linéaire)"""
    if coeffs.linear is not None:
        phi, psi, cov = transition_moments(coeffs.linear, 0.0, t0)
        mean = phi @ coeffs.xi0 + psi
    else:
        v0, x0 = coeffs.v0, coeffs.x0
        b = float(coeffs.eval_b(0.0, v0, x0))
        s = float(coeffs.eval_sigma(0.0, v0, x0))
        mu = float(coeffs.eval_mu(0.0, x0))
        r = float(coeffs.eval_rho(0.0, x0))
        mean = np.array([v0 + b * t0, x0 + mu * t0])
        cov = np.diag([s ** 2 * t0, r ** 2 * t0])
    return np.exp(_gaussian_logpdf(mean, cov, np.stack([vv, xx], axis=-1), 0.0))


def estimate_density_fd(coeffs: CoefficientSet, v_axis, x_axis, time_grid: TimeGrid,
                        scheme: str = 'implicit', max_slices: int = 64) -> FokkerPlanckDensity:
    """
    Résout l'équation de Fokker-Planck pour p(0, ξ0; t, ·)

    Args:
        coeffs: Jeu de coefficients
        v_axis: Axe uniforme en v
        x_axis: Axe uniforme en x
        time_grid: Grille [0, t_end]
        scheme: 'implicit' (défaut), 'crank_nicolson' ou 'explicit'
        max_slices: Nombre maximal de tranches stockées

    Returns:
        FokkerPlanckDensity
    """
    v_axis, x_axis = np.asarray(v_axis, dtype=float), np.asarray(x_axis, dtype=float)
    if abs(time_grid.t_start) > 1e-12:
        raise ValidationException("La grille de temps doit commencer en 0", field='t_start')
    dv, dx = v_axis[1] - v_axis[0], x_axis[1] - x_axis[0]
    theta = scheme_theta(scheme)
    vv, xx = np.meshgrid(v_axis, x_axis, indexing='ij')
    nodes, dt = time_grid.nodes, time_grid.dt

    if theta == 0.0:
        sig2 = np.max(coeffs.eval_sigma(0.0, vv, xx) ** 2)
        rho2 = np.max(coeffs.eval_rho(0.0, xx) ** 2)
        if dt * (sig2 / dv ** 2 + rho2 / dx ** 2) > 1.0:
            raise ConfigurationException(
                f"Condition CFL violée pour le schéma explicite (dt={dt})", setting='dt')

    lam2 = min(float(coeffs.eval_sigma(0.0, coeffs.v0, coeffs.x0)) ** 2, float(coeffs.eval_rho(0.0, coeffs.x0)) ** 2)
    t_min = (3.0 * max(dv, dx)) ** 2 / lam2
    k0 = max(1, int(np.searchsorted(nodes, t_min - 1e-15)))
    if k0 >= len(nodes) - 1:
        raise ConfigurationException("Grille spatiale trop grossière pour l'horizon", setting='dx')

    p = _initial_layer(coeffs, vv, xx, nodes[k0])
    p[0, :] = p[-1, :] = p[:, 0] = p[:, -1] = 0.0
    stride = max(1, int(np.ceil((len(nodes) - 1 - k0) / max_slices)))
    times, slices = [nodes[k0]], [p.copy()]

    for k in range(k0, len(nodes) - 1):
        t_mid = 0.5 * (nodes[k] + nodes[k + 1])
        c_v = forward_coefficients(np.moveaxis(coeffs.eval_b(t_mid, vv, xx), 0, -1),
                                   np.moveaxis(0.5 * coeffs.eval_sigma(t_mid, vv, xx) ** 2, 0, -1), dv)
        c_v = tuple(np.moveaxis(a, -1, 0) for a in c_v)
        c_x = forward_coefficients(coeffs.eval_mu(t_mid, xx), 0.5 * coeffs.eval_rho(t_mid, xx) ** 2, dx)
        p = douglas_step(p, c_v, c_x, dt, theta, 'dirichlet_zero', 'dirichlet_zero')
        p = np.maximum(p, 0.0)
        if (k + 1 - k0) % stride == 0 or k + 1 == len(nodes) - 1:
            times.append(nodes[k + 1])
            slices.append(p.copy())

    density = FokkerPlanckDensity(coeffs, v_axis, x_axis, times, slices, time_grid)
    mass = density.mass(times[-1])
    log = current_app.logger
    if mass < 0.98:
        log.warning(f"⚠️ Perte de masse Fokker-Planck: masse finale {mass:.4f}")
    else:
        log.info(f"✅ Densité Fokker-Planck calculée (masse finale {mass:.4f})")
    return density


def estimate_density_kde(coeffs: CoefficientSet, time_grid: TimeGrid, seed: int, n_paths: int,
                         store_times: Sequence[float], bandwidth=None) -> KernelDensity:
    """Estimateur à noyau de p(0, ξ0; t, ·) à partir de trajectoires de référence"""
    paths = simulate_reference(coeffs, time_grid, seed, n_paths, stage='kde')
    nodes = time_grid.nodes
    clouds, times = [], []
    for t in store_times:
        k = int(np.argmin(np.abs(nodes - t)))
        times.append(nodes[k])
        clouds.append(np.stack([paths.V[:, k], paths.X[:, k]], axis=-1))
    return KernelDensity(coeffs, times, clouds, bandwidth)


# ---------------------------------------------------------------------------
# Mesure ν
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NuMeasure:
    """Atomes pondérés (v_i, g⁻¹(v_i), w_i) sur le graphe de g"""

    v: np.ndarray
    x: np.ndarray
    w: np.ndarray

    @property
    def n_atoms(self) -> int:
        return len(self.w)

    @property
    def atoms(self) -> np.ndarray:
        return np.stack([self.v, self.x], axis=-1)


def build_nu(m_star: TerminalLaw, coeffs: CoefficientSet, n_atoms: Optional[int] = None) -> NuMeasure:
    """
    Quantifie m* aux milieux de quantiles et projette sur le graphe de g

    Args:
        m_star: Loi terminale
        coeffs: Jeu de coefficients (pour g⁻¹)
        n_atoms: Nombre d'atomes (ignoré pour une masse de Dirac)

    Returns:
        NuMeasure
    """
    n = int(setting('DEFAULT_N_ATOMS', n_atoms))
    if n < 1:
        raise ValidationException("n_atoms doit être au moins 1", field='n_atoms')
    if m_star.kind == 'point_mass':
        v = np.array([m_star.location])
    else:
        probs = (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)
        v = np.asarray(m_star.ppf(probs), dtype=float)
    x = np.atleast_1d(g_inverse(coeffs, v))
    w = np.full(len(v), 1.0 / len(v))
    return NuMeasure(v=v, x=x, w=w)


# ---------------------------------------------------------------------------
# Champs φ
# ---------------------------------------------------------------------------

class PhiField:
    """
    φ(t, z) = Σ w_i p(t, z; T, y_i) / p(0, ξ0; T, y_i) en forme close

    Les gradients et le hessien de ln φ sont analytiques.
    """

    backend = 'closed_form_gaussian'
    is_null = False

    def __init__(self, coeffs: CoefficientSet, nu: NuMeasure, kernel: GaussianKernel,
                 floor_abs: Optional[float] = None, det_floor: Optional[float] = None,
                 floor_rel: Optional[float] = None):
        self.coeffs = coeffs
        self.nu = nu
        self.kernel = kernel
        self.T = coeffs.T
        self.floor_abs = setting('DENSITY_FLOOR_ABS', floor_abs)
        self.floor_rel = setting('DENSITY_FLOOR_REL', floor_rel)
        self.det_floor = setting('DET_FLOOR', det_floor)
        log_p0 = self._log_kernel(np.asarray(0.0), np.asarray(coeffs.v0), np.asarray(coeffs.x0))[0]
        if np.any(log_p0 < np.log(self.floor_abs)):
            atom = int(np.argmin(log_p0))
            raise ImproperConditioningException(
                f"Densité nulle au dénominateur pour l'atome {atom}", atom=atom)
        self.log_p0 = log_p0
        self.log_w = np.log(nu.w) - log_p0

    def _log_kernel(self, t, v, x):
        phi, psi, cov = self.kernel.matrices(t)
        z = np.stack(np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(x, dtype=float)), axis=-1)
        mean = np.einsum('...ij,...j->...i', phi, z) + psi
        det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
        if np.any(det < self.det_floor):
            raise SingularCovarianceException(
                f"Covariance de transition singulière (det={np.min(det):.3e})", determinant=float(np.min(det)))
        inv = np.stack([np.stack([cov[..., 1, 1], -cov[..., 0, 1]], -1),
                        np.stack([-cov[..., 1, 0], cov[..., 0, 0]], -1)], -2) / det[..., None, None]
        r = self.nu.atoms - mean[..., None, :]
        q = np.einsum('...ni,...ij,...nj->...n', r, inv, r)
        log_k = -0.5 * q - LOG_2PI - 0.5 * np.log(det)[..., None]
        return log_k, r, inv, phi

    def _terms(self, t, v, x):
        log_k, r, inv, phi = self._log_kernel(np.asarray(t, dtype=float), v, x)
        a = self.log_w + log_k
        # Contributions sous floor_rel × la plus forte: ignorées
        cutoff = np.max(a, axis=-1, keepdims=True) + np.log(self.floor_rel)
        a = np.where(a < cutoff, -np.inf, a)
        w_r = np.einsum('...ij,...nj->...ni', inv, r)
        grads = np.einsum('...ji,...nj->...ni', phi, w_r)
        return a, grads, inv, phi

    def log_phi(self, t, v, x):
        a = self._terms(t, v, x)[0]
        return np.maximum(logsumexp(a, axis=-1), np.log(self.floor_abs))

    def __call__(self, t, v, x):
        return np.exp(self.log_phi(t, v, x))

    def grad_log_phi(self, t, v, x):
        """(∂_v ln φ, ∂_x ln φ), forme (..., 2)"""
        a, grads, _, _ = self._terms(t, v, x)
        return np.einsum('...n,...ni->...i', softmax(a, axis=-1), grads)

    def hessian_ratio(self, t, v, x):
        """∇²φ / φ, forme (..., 2, 2)"""
        a, grads, inv, phi = self._terms(t, v, x)
        pi = softmax(a, axis=-1)
        outer = np.einsum('...n,...ni,...nj->...ij', pi, grads, grads)
        precision = np.einsum('...ki,...kl,...lj->...ij', phi, inv, phi)
        return outer - precision

    def dt_log_phi(self, t, v, x):
        t = np.asarray(t, dtype=float)
        h = np.minimum(1e-3 * self.T, 0.1 * (self.T - t))
        return central_difference(lambda s: self.log_phi(s, v, x), t, h)

    def is_degenerate(self, t, v, x):
        a = self._terms(t, v, x)[0]
        return logsumexp(a, axis=-1) < np.log(self.floor_abs)


class NullPhiField:
    """Conditionnement nul: φ ≡ 1"""

    backend = 'null'
    is_null = True

    def __init__(self, coeffs: CoefficientSet):
        self.coeffs = coeffs
        self.T = coeffs.T

    def log_phi(self, t, v, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(v), np.shape(x)))

    def __call__(self, t, v, x):
        return np.exp(self.log_phi(t, v, x))

    def grad_log_phi(self, t, v, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(v), np.shape(x)) + (2,))

    def is_degenerate(self, t, v, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(v), np.shape(x)), dtype=bool)


def _log_gradient(log_values, spacing, axis):
    """Stencil d'ordre 4 à l'intérieur, différences d'ordre 2 sur les deux nœuds de bord"""
    inner = stencil_derivative(log_values, spacing, axis)
    edge = np.gradient(log_values, spacing, axis=axis, edge_order=2)
    return np.where(np.isnan(inner), edge, inner)


class GridPhiField:
    """φ tabulé par résolution rétrograde de l'équation de Kolmogorov"""

    backend = 'fokker_planck_grid'
    is_null = False

    def __init__(self, coeffs, times, v_axis, x_axis, values, floor_abs):
        self.coeffs = coeffs
        self.T = coeffs.T
        self.times = np.asarray(times, dtype=float)
        self.v_axis = np.asarray(v_axis, dtype=float)
        self.x_axis = np.asarray(x_axis, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.floor_abs = floor_abs
        log_values = np.log(np.maximum(self.values, floor_abs))
        dv, dx = self.v_axis[1] - self.v_axis[0], self.x_axis[1] - self.x_axis[0]
        axes = (self.times, self.v_axis, self.x_axis)
        self._log = RegularGridInterpolator(axes, log_values, bounds_error=False, fill_value=None)
        self._dv = RegularGridInterpolator(axes, _log_gradient(log_values, dv, axis=1),
                                           bounds_error=False, fill_value=None)
        self._dx = RegularGridInterpolator(axes, _log_gradient(log_values, dx, axis=2),
                                           bounds_error=False, fill_value=None)

    def _points(self, t, v, x):
        arrays = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, v, x)))
        return np.stack([a.ravel() for a in arrays], axis=-1), arrays[0].shape

    def log_phi(self, t, v, x):
        pts, shape = self._points(t, v, x)
        return self._log(pts).reshape(shape)

    def __call__(self, t, v, x):
        return np.exp(self.log_phi(t, v, x))

    def grad_log_phi(self, t, v, x):
        pts, shape = self._points(t, v, x)
        return np.stack([self._dv(pts).reshape(shape), self._dx(pts).reshape(shape)], axis=-1)

    def is_degenerate(self, t, v, x):
        pts, shape = self._points(t, v, x)
        return self._log(pts).reshape(shape) <= np.log(self.floor_abs)


def build_phi_fd(coeffs: CoefficientSet, nu: NuMeasure, density: FokkerPlanckDensity,
                 scheme: str = 'crank_nicolson', boundary: str = 'neumann_zero',
                 floor_abs: Optional[float] = None) -> GridPhiField:
    """
    φ par résolution rétrograde de φ_t + Lφ = 0 sur la grille de la densité

    Les dénominateurs p(0, ξ0; T, y_i) proviennent de la résolution directe.
    """
    floor = setting('DENSITY_FLOOR_ABS', floor_abs)
    T = coeffs.T
    p0 = density.evaluate(0.0, coeffs.xi0, T, nu.atoms)
    if np.any(p0 <= floor):
        atom = int(np.argmin(p0))
        raise ImproperConditioningException(
            f"Atome {atom} hors du support de la densité (p={p0[atom]:.3e})", atom=atom)

    v_axis, x_axis = density.v_axis, density.x_axis
    dv, dx = v_axis[1] - v_axis[0], x_axis[1] - x_axis[0]
    vv, xx = np.meshgrid(v_axis, x_axis, indexing='ij')
    nodes, dt = density.time_grid.nodes, density.time_grid.dt
    theta = scheme_theta(scheme)

    lam2 = min(float(np.min(coeffs.eval_sigma(T, nu.v, nu.x))) ** 2, float(np.min(coeffs.eval_rho(T, nu.x))) ** 2)
    k0 = max(1, int(np.ceil((3.0 * max(dv, dx)) ** 2 / lam2 / dt - 1e-9)))
    k_start = len(nodes) - 1 - k0
    tau0 = T - nodes[k_start]

    # Couche terminale: noyau de transition sur [T - tau0, T]
    z = np.stack([vv, xx], axis=-1)
    phi = np.zeros_like(vv)
    if coeffs.linear is not None:
        kernel = GaussianKernel(coeffs.linear, T)
        mats, psi, cov = kernel.matrices(np.asarray(nodes[k_start]))
        mean = np.einsum('ij,...j->...i', mats, z) + psi
        for i in range(nu.n_atoms):
            phi += nu.w[i] / p0[i] * np.exp(_gaussian_logpdf(mean, cov, nu.atoms[i], 0.0))
    else:
        for i in range(nu.n_atoms):
            vi, xi = nu.v[i], nu.x[i]
            drift = np.array([float(coeffs.eval_b(T, vi, xi)), float(coeffs.eval_mu(T, xi))])
            cov = np.diag([float(coeffs.eval_sigma(T, vi, xi)) ** 2 * tau0, float(coeffs.eval_rho(T, xi)) ** 2 * tau0])
            phi += nu.w[i] / p0[i] * np.exp(_gaussian_logpdf(z + drift * tau0, cov, nu.atoms[i], 0.0))

    slices = [phi.copy()]
    for k in range(k_start, 0, -1):
        t_mid = 0.5 * (nodes[k] + nodes[k - 1])
        c_v = backward_coefficients(coeffs.eval_b(t_mid, vv, xx), 0.5 * coeffs.eval_sigma(t_mid, vv, xx) ** 2, dv)
        c_x = backward_coefficients(coeffs.eval_mu(t_mid, xx), 0.5 * coeffs.eval_rho(t_mid, xx) ** 2, dx)
        phi = douglas_step(phi, c_v, c_x, dt, theta, boundary, boundary)
        slices.append(phi.copy())

    values = np.stack(slices[::-1], axis=0)
    field = GridPhiField(coeffs, nodes[:k_start + 1], v_axis, x_axis, values, floor)
    current_app.logger.info(f"✅ Champ φ par différences finies ({len(slices)} tranches)")
    return field


_PHI_FIELDS = weakref.WeakKeyDictionary()


def build_phi(density: DensityModel, nu: NuMeasure, **kwargs):
    """Construit le champ φ adapté au backend de densité"""
    if isinstance(density, GaussianDensityModel):
        return PhiField(density.coeffs, nu, density.kernel, **kwargs)
    if isinstance(density, FokkerPlanckDensity):
        return build_phi_fd(density.coeffs, nu, density, **kwargs)
    raise ValidationException(f"Le backend {density.backend} ne fournit pas de densités de transition",
                              field='backend')


def phi(density: DensityModel, nu: NuMeasure, t, v, x):
    """
    Évalue φ(t, v, x) (erreur si tous les atomes sont sous le plancher)

    Le champ est construit une fois par couple (densité, ν) puis réutilisé.
    """
    if np.any(np.asarray(t) >= density.coeffs.T):
        raise ValidationException("φ n'est défini que pour t < T", field='t')
    fields = _PHI_FIELDS.setdefault(density, weakref.WeakKeyDictionary())
    field = fields.get(nu)
    if field is None:
        field = fields[nu] = build_phi(density, nu)
    if np.any(field.is_degenerate(t, v, x)):
        raise DegeneratePhiException("Tous les atomes sont sous le plancher de densité", time=float(np.max(t)))
    return field(t, v, x)


def theta(phi_field, coeffs: CoefficientSet, t, v, x):
    """
    Dérive du pont θ = (σ ∂_v ln φ, ρ ∂_x ln φ)

    Returns:
        Tuple (θ¹, θ²)
    """
    grad = phi_field.grad_log_phi(t, v, x)
    th1 = coeffs.eval_sigma(t, v, x) * grad[..., 0]
    th2 = coeffs.eval_rho(t, x) * grad[..., 1]
    if not (np.all(np.isfinite(th1)) and np.all(np.isfinite(th2))):
        raise DegeneratePhiException("Gradient de ln φ non fini", time=float(np.max(t)))
    return th1, th2


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _exponential_moment(coeffs: CoefficientSet, lam: float) -> float:
    """∫ exp(λ |ξ0 - (v, g⁻¹(v))|² / T) m*(dv) pour m* continue (inf si divergent)"""
    law, T = coeffs.m_star, coeffs.T
    g_lo, g_hi = (float(coeffs.eval_g(b)) for b in coeffs.x_domain)
    lo, hi = law.support(12.0)
    lo, hi = max(lo, g_lo), min(hi, g_hi)

    def log_integrand(v):
        x = g_inverse(coeffs, v)
        return lam * ((coeffs.v0 - v) ** 2 + (coeffs.x0 - x) ** 2) / T + np.log(max(float(law.pdf(v)), 1e-320))

    mid_lo, mid_hi = law.support(8.0)
    for edge, inner in ((hi, max(min(mid_hi, hi), lo)), (lo, min(max(mid_lo, lo), hi))):
        if edge != inner and log_integrand(edge) > log_integrand(inner):
            return float('inf')
    value, _ = integrate.quad(lambda v: np.exp(log_integrand(v)), lo, hi, limit=200)
    return float(value)


def check_proper(density: DensityModel, nu: NuMeasure, lam: float, ladder_size: int = 8,
                 bound_eta: float = 1.0e6, bound_integral: float = 1.0e12,
                 floor_abs: Optional[float] = None) -> Dict:
    """
    Diagnostic de conditionnement propre (échelle (T - t) η et moment exponentiel)

    Args:
        density: Modèle de densité
        nu: Mesure ν
        lam: Paramètre λ du moment exponentiel
        ladder_size: Nombre d'instants t_j = T (1 - 2^-j)

    Returns:
        Rapport (dict) avec 'passed'
    """
    coeffs = density.coeffs
    T, xi0 = coeffs.T, coeffs.xi0
    floor = setting('DENSITY_FLOOR_ABS', floor_abs)

    p0 = np.atleast_1d(density.evaluate(0.0, xi0, T, nu.atoms))
    if np.any(p0 <= floor):
        atom = int(np.argmin(p0))
        raise ImproperConditioningException(
            f"Atome {atom} = ({nu.v[atom]:.4g}, {nu.x[atom]:.4g}) hors du support de la densité", atom=atom)

    ladder = None
    max_eta = None
    if density.supports_transitions:
        times = T * (1.0 - 2.0 ** -np.arange(1, ladder_size + 1))
        ladder = []
        for t in times:
            eta = np.atleast_1d(density.evaluate(t, xi0, T, nu.atoms)) / p0
            if np.any(eta <= 0):
                raise ImproperConditioningException(f"η nul à t={t}", atom=int(np.argmin(eta)))
            ladder.append((T - t) * eta)
        ladder = np.asarray(ladder)
        max_eta = float(np.max(ladder))

    dist2 = (nu.v - coeffs.v0) ** 2 + (nu.x - coeffs.x0) ** 2
    atom_integral = float(np.sum(nu.w * np.exp(lam * dist2 / T)))
    continuous = _exponential_moment(coeffs, lam) if coeffs.m_star.is_continuous else None
    integral = continuous if continuous is not None else atom_integral

    passed = bool(np.isfinite(integral) and integral <= bound_integral
                  and (max_eta is None or (np.isfinite(max_eta) and max_eta <= bound_eta)))
    return {
        'passed': passed,
        'backend': density.backend,
        'lambda': lam,
        'ladder_available': ladder is not None,
        'max_scaled_eta': max_eta,
        'scaled_eta_per_atom': None if ladder is None else ladder.max(axis=0).tolist(),
        'atom_integral': atom_integral,
        'continuous_integral': continuous,
        'bounds': {'eta': bound_eta, 'integral': bound_integral},
    }


def phi_pde_residual(phi_field, coeffs: CoefficientSet, probe: ProbeGrid, delta: Optional[float] = None) -> Dict:
    """
    Résidu de φ_t + b φ_v + μ φ_x + ½σ² φ_vv + ½ρ² φ_xx, rapporté à φ

    Args:
        phi_field: Champ φ (forme close ou grille)
        coeffs: Jeu de coefficients
        probe: Grille de sondage (intérieure)
        delta: Garde temporelle (défaut T * TIME_GUARD_FRACTION)

    Returns:
        Statistiques du résidu
    """
    guard = delta if delta is not None else coeffs.T * current_app.config['TIME_GUARD_FRACTION']
    if phi_field.is_null:
        return {'tested': False, 'flagged': 'null_conditioning', 'max': None, 'l2': None}
    if isinstance(phi_field, GridPhiField):
        return _grid_phi_residual(phi_field, coeffs, probe, guard)

    tt, vv, xx = probe.mesh()
    keep = tt <= coeffs.T - guard
    tt, vv, xx = tt[keep], vv[keep], xx[keep]
    grad = phi_field.grad_log_phi(tt, vv, xx)
    hess = phi_field.hessian_ratio(tt, vv, xx)
    resid = (phi_field.dt_log_phi(tt, vv, xx)
             + coeffs.eval_b(tt, vv, xx) * grad[..., 0]
             + coeffs.eval_mu(tt, xx) * grad[..., 1]
             + 0.5 * coeffs.eval_sigma(tt, vv, xx) ** 2 * hess[..., 0, 0]
             + 0.5 * coeffs.eval_rho(tt, xx) ** 2 * hess[..., 1, 1])
    return _residual_stats(resid, phi_field.backend)


def _grid_phi_residual(field: GridPhiField, coeffs, probe, guard):
    times, v_axis, x_axis = field.times, field.v_axis, field.x_axis
    dv, dx = v_axis[1] - v_axis[0], x_axis[1] - x_axis[0]
    vals = field.values
    phi_v = stencil_derivative(vals, dv, axis=1)
    phi_vv = stencil_derivative(vals, dv, axis=1, order=2)
    phi_x = stencil_derivative(vals, dx, axis=2)
    phi_xx = stencil_derivative(vals, dx, axis=2, order=2)

    k_sel = np.where((times >= probe.t[0]) & (times <= min(probe.t[-1], coeffs.T - guard)))[0]
    k_sel = k_sel[(k_sel >= 1) & (k_sel <= len(times) - 2)]
    v_sel = (v_axis >= probe.v[0]) & (v_axis <= probe.v[-1])
    x_sel = (x_axis >= probe.x[0]) & (x_axis <= probe.x[-1])
    if len(k_sel) == 0 or not v_sel.any() or not x_sel.any():
        raise ValidationException("La grille de sondage ne contient aucun nœud du champ", field='probe')

    vv, xx = np.meshgrid(v_axis, x_axis, indexing='ij')
    out = []
    for k in k_sel:
        t = times[k]
        phi_t = (vals[k + 1] - vals[k - 1]) / (times[k + 1] - times[k - 1])
        r = (phi_t + coeffs.eval_b(t, vv, xx) * phi_v[k] + coeffs.eval_mu(t, xx) * phi_x[k]
             + 0.5 * coeffs.eval_sigma(t, vv, xx) ** 2 * phi_vv[k]
             + 0.5 * coeffs.eval_rho(t, xx) ** 2 * phi_xx[k]) / np.maximum(vals[k], field.floor_abs)
        out.append(r[np.ix_(v_sel, x_sel)])
    resid = np.asarray(out)
    return _residual_stats(resid[np.isfinite(resid)], field.backend)


def _residual_stats(resid, backend):
    resid = np.asarray(resid, dtype=float)
    return {
        'tested': True,
        'backend': backend,
        'normalized_by_phi': True,
        'max': float(np.max(np.abs(resid))),
        'l2': float(np.sqrt(np.mean(resid ** 2))),
        'n_points': int(resid.size),
    }


def likelihood_martingale_check(phi_field, paths: PathBundle, checkpoints: Sequence[float],
                                n_se: float = 4.0) -> Dict:
    """
    Moyenne de L_t = φ(t, V_t, X_t) le long de trajectoires de référence

    Returns:
        Rapport par instant (moyenne, erreur standard, verdict) et clôture de surmartingale
    """
    nodes = paths.times
    rows = []
    for t in list(checkpoints) + [nodes[-1]]:
        k = int(np.argmin(np.abs(nodes - t)))
        values = phi_field(nodes[k], paths.V[:, k], paths.X[:, k])
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / np.sqrt(len(values)))
        rows.append({'t': float(nodes[k]), 'mean': mean, 'se': se, 'within': abs(mean - 1.0) <= n_se * se})
    closure = rows.pop()
    closure['within'] = closure['mean'] <= 1.0 + n_se * closure['se']
    return {'passed': all(r['within'] for r in rows) and closure['within'],
            'checkpoints': rows, 'closure': closure}


def representation_check(phi_field, reference: PathBundle, bridged: PathBundle, t: float,
                         test_function: Optional[Callable] = None, n_se: float = 4.0) -> Dict:
    """
    Cohérence E^Q0[L_t f(ξ_t)] = E^Pν[f(ξ_t)] pour une fonction test bornée
    """
    f = test_function or (lambda v, x: np.tanh(v) * np.cos(x))
    k_ref = int(np.argmin(np.abs(reference.times - t)))
    k_br = int(np.argmin(np.abs(bridged.times - t)))
    tk = reference.times[k_ref]
    weighted = phi_field(tk, reference.V[:, k_ref], reference.X[:, k_ref]) * f(reference.V[:, k_ref], reference.X[:, k_ref])
    keep = ~bridged.terminated
    direct = f(bridged.V[keep, k_br], bridged.X[keep, k_br])
    if direct.size < 2:
        raise InsufficientSampleException("Trop peu de trajectoires de pont", available=int(direct.size), required=2)
    m1, m2 = float(np.mean(weighted)), float(np.mean(direct))
    se = float(np.sqrt(np.var(weighted, ddof=1) / weighted.size + np.var(direct, ddof=1) / direct.size))
    return {'t': float(tk), 'weighted_reference': m1, 'bridge': m2, 'joint_se': se,
            'passed': abs(m1 - m2) <= n_se * se}
