"""
Briques de différences finies: systèmes tridiagonaux, fermetures de bord,
θ-schéma 1-D et schéma ADI de Douglas 2-D.

Convention: un opérateur discret le long d'un axe est donné par trois tableaux
(A, B, C) tels que (Lu)_i = A_i u_{i-1} + B_i u_i + C_i u_{i+1} sur les nœuds
intérieurs. Les nœuds de bord sont déduits des nœuds intérieurs par la
fermeture choisie.
"""

import numpy as np
from scipy.linalg import solve_banded

from .exceptions import ConfigurationException

# u_0 = a u_1 + b u_2 (et symétriquement à droite)
CLOSURES = {
    'linear_extrapolation': (2.0, -1.0),
    'neumann_zero': (1.0, 0.0),
    'dirichlet_zero': (0.0, 0.0),
}

SCHEMES = {
    'crank_nicolson': 0.5,
    'implicit_euler': 1.0,
    'implicit': 1.0,
    'explicit': 0.0,
}


def closure(policy):
    try:
        return CLOSURES[policy]
    except KeyError:
        raise ConfigurationException(f"Politique de bord inconnue: {policy}", setting='boundary')


def scheme_theta(scheme):
    try:
        return SCHEMES[scheme]
    except KeyError:
        raise ConfigurationException(f"Schéma inconnu: {scheme}", setting='scheme')


def apply_closure(u, policy, axis=-1):
    a, b = closure(policy)
    w = np.moveaxis(u, axis, -1)
    w[..., 0] = a * w[..., 1] + b * w[..., 2]
    w[..., -1] = a * w[..., -2] + b * w[..., -3]
    return u


def solve_tridiagonal(lower, diag, upper, rhs):
    """
    Résout un système tridiagonal (lot de systèmes selon les axes de tête)

    Args:
        lower: Sous-diagonale (lower[..., 0] ignoré)
        diag: Diagonale
        upper: Sur-diagonale (upper[..., -1] ignoré)
        rhs: Second membre, la dernière dimension porte l'inconnue

    Returns:
        Solution de même forme que rhs
    """
    rhs = np.asarray(rhs, dtype=float)
    lower, diag, upper = (np.broadcast_to(np.asarray(a, dtype=float), rhs.shape) for a in (lower, diag, upper))
    n = rhs.shape[-1]
    if rhs.ndim == 1:
        ab = np.zeros((3, n))
        ab[0, 1:] = upper[:-1]
        ab[1] = diag
        ab[2, :-1] = lower[1:]
        return solve_banded((1, 1), ab, rhs)

    # Algorithme de Thomas vectorisé sur les lignes
    c = np.empty_like(rhs)
    d = np.empty_like(rhs)
    c[..., 0] = upper[..., 0] / diag[..., 0]
    d[..., 0] = rhs[..., 0] / diag[..., 0]
    for i in range(1, n):
        m = diag[..., i] - lower[..., i] * c[..., i - 1]
        c[..., i] = upper[..., i] / m
        d[..., i] = (rhs[..., i] - lower[..., i] * d[..., i - 1]) / m
    x = np.empty_like(rhs)
    x[..., -1] = d[..., -1]
    for i in range(n - 2, -1, -1):
        x[..., i] = d[..., i] - c[..., i] * x[..., i + 1]
    return x


def backward_coefficients(drift, half_var, h, reaction=0.0):
    """Opérateur drift * d/dz + half_var * d²/dz² + reaction (centré)"""
    drift, half_var = np.asarray(drift, dtype=float), np.asarray(half_var, dtype=float)
    a = half_var / h ** 2
    A = a - drift / (2.0 * h)
    B = -2.0 * a + reaction
    C = a + drift / (2.0 * h)
    shape = np.broadcast_shapes(A.shape, np.shape(B), C.shape)
    return tuple(np.broadcast_to(arr, shape).copy() for arr in (A, B, C))


def forward_coefficients(drift, half_var, h):
    """Adjoint d²(half_var p)/dz² - d(drift p)/dz, le long du dernier axe"""
    drift = np.asarray(drift, dtype=float)
    half_var = np.asarray(half_var, dtype=float)
    drift, half_var = np.broadcast_arrays(drift, half_var)
    A = np.zeros(drift.shape)
    C = np.zeros(drift.shape)
    B = -2.0 * half_var / h ** 2
    A[..., 1:] = half_var[..., :-1] / h ** 2 + drift[..., :-1] / (2.0 * h)
    C[..., :-1] = half_var[..., 1:] / h ** 2 - drift[..., 1:] / (2.0 * h)
    return A, B, C


def apply_operator(coeffs, u):
    """(Lu) sur les nœuds intérieurs du dernier axe, zéro aux bords"""
    A, B, C = coeffs
    out = np.zeros_like(u)
    out[..., 1:-1] = A[..., 1:-1] * u[..., :-2] + B[..., 1:-1] * u[..., 1:-1] + C[..., 1:-1] * u[..., 2:]
    return out


def solve_implicit(coeffs, rhs, kappa, policy):
    """Résout (I - kappa L) u = rhs le long du dernier axe avec fermeture de bord"""
    A, B, C = coeffs
    lower = -kappa * A[..., 1:-1]
    diag = 1.0 - kappa * B[..., 1:-1]
    upper = -kappa * C[..., 1:-1]
    lower, diag, upper = (np.array(np.broadcast_to(a, rhs[..., 1:-1].shape)) for a in (lower, diag, upper))
    a, b = closure(policy)
    diag[..., 0] += a * lower[..., 0]
    upper[..., 0] += b * lower[..., 0]
    diag[..., -1] += a * upper[..., -1]
    lower[..., -1] += b * upper[..., -1]
    u = np.empty_like(rhs)
    u[..., 1:-1] = solve_tridiagonal(lower, diag, upper, rhs[..., 1:-1])
    return apply_closure(u, policy)


def theta_step(u, coeffs, dt, theta, policy, source=None):
    """
    Un pas du θ-schéma pour u_τ = L u + source (τ temps restant ou temps direct)
    """
    rhs = u + (1.0 - theta) * dt * apply_operator(coeffs, u)
    if source is not None:
        rhs = rhs + dt * source
    if theta == 0.0:
        return apply_closure(rhs, policy)
    return solve_implicit(coeffs, rhs, theta * dt, policy)


def douglas_step(u, coeffs0, coeffs1, dt, theta, policy0, policy1, source=None):
    """
    Un pas ADI de Douglas pour u_τ = (L0 + L1) u + source sur une grille 2-D

    Args:
        u: Valeurs de forme (n0, n1)
        coeffs0: Opérateur le long de l'axe 0, tableaux de forme (n0, n1)
        coeffs1: Opérateur le long de l'axe 1, tableaux de forme (n0, n1)
        dt: Pas de temps
        theta: 1/2 pour Crank-Nicolson, 1 pour Euler implicite
        policy0: Fermeture de bord selon l'axe 0
        policy1: Fermeture de bord selon l'axe 1
        source: Terme source optionnel

    Returns:
        Nouvelles valeurs
    """
    c0 = tuple(np.moveaxis(a, 0, -1) for a in coeffs0)
    u0 = np.moveaxis(u, 0, -1)
    l0u = np.moveaxis(apply_operator(c0, u0), -1, 0)
    l1u = apply_operator(coeffs1, u)

    y0 = u + dt * (l0u + l1u)
    if source is not None:
        y0 = y0 + dt * source
    if theta == 0.0:
        apply_closure(y0, policy1, axis=1)
        return apply_closure(y0, policy0, axis=0)

    rhs1 = np.moveaxis(y0 - theta * dt * l0u, 0, -1)
    y1 = np.moveaxis(solve_implicit(c0, np.ascontiguousarray(rhs1), theta * dt, policy0), -1, 0)
    y2 = solve_implicit(coeffs1, np.ascontiguousarray(y1 - theta * dt * l1u), theta * dt, policy1)
    return apply_closure(y2, policy0, axis=0)
