"""
Fixtures partagées de la suite de tests Kyle Lab
"""

import numpy as np
import pytest

from kylelab import create_lab
from kylelab.services.affine import linear_reference_model
from kylelab.services.presets import brownian, constant, g_map
from kylelab.services.sde_core import CoefficientSet, TerminalLaw
from kylelab.utils.grids import ProbeGrid, TimeGrid


@pytest.fixture(autouse=True)
def app():
    """Application en configuration de test, contexte poussé par pytest-flask pour chaque test"""
    return create_lab('testing')


@pytest.fixture
def brownian_coeffs():
    """b = μ = 0, σ = ρ = 1, g = id, m* = N(0, 1)"""
    return brownian(T=1.0, m_star=TerminalLaw.gaussian(0.0, 1.0))


@pytest.fixture
def linear_model():
    """Modèle linéaire f = g = k = 0, β = 1, S0 = 0 (S(t) = tanh t)"""
    return linear_reference_model(f=0.0, g_fun=0.0, k=0.0, beta=1.0, S0=0.0, T=1.0)


@pytest.fixture
def drift_coeffs():
    """μ = x, ρ = 1: condition de compatibilité du cas martingale violée"""
    zero = constant(0.0)
    return CoefficientSet(b=zero, sigma=constant(1.0), mu=lambda t, x: np.asarray(x, dtype=float),
                          rho=constant(1.0), g=g_map('identity'), m_star=TerminalLaw.gaussian(0.0, 1.0),
                          T=1.0, name='drift')


@pytest.fixture
def probe():
    return ProbeGrid.rectangle((0.1, 0.9), (-2.0, 2.0), (-2.0, 2.0), n=7)


@pytest.fixture
def unit_grid():
    return TimeGrid(0.0, 1.0, 100)
