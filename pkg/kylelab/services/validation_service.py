"""
Service de validation pour Kyle Lab

Ce service gère le schéma des scénarios (pydantic) et les contrôles métier
avant la construction des coefficients.
"""

import hashlib
import json
from decimal import Decimal, InvalidOperation
from typing import Any, Dict, List, Literal, Optional, Tuple

from flask import current_app
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..utils.exceptions import ConfigurationException, LabException, ValidationException
from ..utils.grids import ProbeGrid, TimeGrid
from .presets import PRESETS, build_preset, g_map, terminal_law_from_dict


def _decimal(value: Any) -> float:
    """Nombre transmis en chaîne décimale (ou nombre JSON)"""
    if isinstance(value, bool):
        raise ValueError("booléen inattendu")
    try:
        return float(Decimal(str(value)))
    except (InvalidOperation, ValueError):
        raise ValueError(f"nombre décimal invalide: {value!r}")


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class GMapConfig(_Section):
    kind: Literal['identity', 'affine', 'cubic', 'exp'] = 'identity'
    slope: float = 1.0
    intercept: float = 0.0


class TimeGridConfig(_Section):
    n_steps: int = Field(default=200, ge=1)


class ProbeConfig(_Section):
    n: int = Field(default=9, ge=2)
    t_range: Optional[Tuple[float, float]] = None
    v_range: Optional[Tuple[float, float]] = None
    x_range: Optional[Tuple[float, float]] = None


class SimulateConfig(_Section):
    n_paths: int = Field(default=2000, ge=1)
    export_paths: int = Field(default=20, ge=0)


class BridgeSection(_Section):
    delta: float = Field(default=1.0e-3, gt=0)
    n_paths: int = Field(default=2000, ge=1)
    n_steps: int = Field(default=500, ge=1)
    n_atoms: int = Field(default=64, ge=1)
    truncation_levels: Optional[List[float]] = None
    apply_truncation: Optional[float] = None
    backend: Literal['auto', 'gaussian', 'fokker_planck'] = 'auto'
    lam: float = Field(default=0.1, gt=0)
    ks_threshold: str = '0.03'

    @field_validator('ks_threshold')
    @classmethod
    def _tolerance(cls, value):
        _decimal(value)
        return value


class FilterConfig(_Section):
    n_particles: int = Field(default=2000, ge=2)
    n_obs: int = Field(default=5, ge=1)
    rmse_tol: str = '0.02'
    z_tol: str = '0.05'


class PDESection(_Section):
    dx: float = Field(default=0.05, gt=0)
    dt: float = Field(default=1.0e-2, gt=0)
    dv: float = Field(default=0.1, gt=0)
    n_std: float = Field(default=5.0, gt=0)
    scheme: Literal['crank_nicolson', 'implicit_euler', 'implicit', 'explicit'] = 'crank_nicolson'
    boundary: Literal['linear_extrapolation', 'neumann_zero', 'dirichlet_zero'] = 'linear_extrapolation'
    solve_F: bool = True


class AffineSection(_Section):
    tolerance: str = '1e-6'


class StrategyConfig(_Section):
    kind: Literal['bridge', 'degraded_bridge', 'affine', 'scaled_bridge', 'time_shifted_bridge', 'zero']
    factor: float = 1.0
    shift: float = 0.0
    n_atoms: Optional[int] = Field(default=None, ge=1)
    name: Optional[str] = None


class EquilibriumConfig(_Section):
    n_paths: int = Field(default=2000, ge=2)
    seeds: List[str] = Field(default_factory=lambda: ['1'])
    ks_gate: str = '0.05'
    delta_sensitivity: bool = False

    @field_validator('seeds')
    @classmethod
    def _seeds(cls, value):
        for seed in value:
            if not str(seed).isdigit():
                raise ValueError(f"graine invalide: {seed!r}")
        return value


class ScenarioConfig(_Section):
    """Description complète d'un scénario (fichier JSON)"""

    name: str = Field(min_length=1)
    preset: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    g: GMapConfig = Field(default_factory=GMapConfig)
    terminal_law: Optional[Dict[str, Any]] = None
    T: str = '1'
    v0: str = '0'
    x0: str = '0'
    x_domain: Tuple[float, float] = (-50.0, 50.0)
    seed: str = '0'
    time_grid: TimeGridConfig = Field(default_factory=TimeGridConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    bridge: BridgeSection = Field(default_factory=BridgeSection)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    pde: PDESection = Field(default_factory=PDESection)
    affine: AffineSection = Field(default_factory=AffineSection)
    strategies: List[StrategyConfig] = Field(default_factory=lambda: [
        StrategyConfig(kind='zero'), StrategyConfig(kind='scaled_bridge', factor=0.5),
        StrategyConfig(kind='degraded_bridge')])
    equilibrium: EquilibriumConfig = Field(default_factory=EquilibriumConfig)
    output_dir: Optional[str] = None

    @field_validator('preset')
    @classmethod
    def _known_preset(cls, value):
        if value not in PRESETS:
            raise ValueError(f"préréglage inconnu: {value} (disponibles: {', '.join(PRESETS)})")
        return value

    @field_validator('T', 'v0', 'x0')
    @classmethod
    def _numbers(cls, value):
        _decimal(value)
        return str(value)

    @field_validator('seed')
    @classmethod
    def _seed(cls, value):
        if not str(value).isdigit() or int(value) >= 2 ** 64:
            raise ValueError("la graine doit être un entier décimal non signé sur 64 bits")
        return str(value)

    @model_validator(mode='after')
    def _horizon(self):
        if _decimal(self.T) <= 0:
            raise ValueError("T doit être strictement positif")
        if not self.x_domain[1] > self.x_domain[0]:
            raise ValueError("x_domain doit être un intervalle non vide")
        return self

    @property
    def horizon(self) -> float:
        return _decimal(self.T)

    @property
    def seed_value(self) -> int:
        return int(self.seed)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()


class ValidationService:
    """Service pour la validation des scénarios"""

    def load(self, path: str) -> ScenarioConfig:
        """
        Lit et valide un fichier de scénario

        Args:
            path: Chemin du fichier JSON

        Returns:
            ScenarioConfig
        """
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                data = json.load(handle)
        except OSError as e:
            raise ConfigurationException(f"Lecture du scénario impossible: {e}", setting='config')
        except json.JSONDecodeError as e:
            raise ConfigurationException(f"JSON invalide ({e.msg}, ligne {e.lineno})", setting='config')
        return self.parse(data)

    def parse(self, data: Dict[str, Any]) -> ScenarioConfig:
        is_valid, errors = self.validate_scenario(data)
        if not is_valid:
            raise ConfigurationException("; ".join(errors), setting='config')
        return ScenarioConfig.model_validate(data)

    def validate_scenario(self, data: Dict[str, Any]) -> Tuple[bool, List[str]]:
        """
        Valide les données d'un scénario

        Args:
            data: Contenu JSON du scénario

        Returns:
            Tuple (is_valid, errors_list)
        """
        errors = []
        try:
            scenario = ScenarioConfig.model_validate(data)
        except ValidationError as e:
            for err in e.errors():
                location = '.'.join(str(p) for p in err['loc']) or 'scenario'
                errors.append(f"{location}: {err['msg']}")
            return False, errors

        errors.extend(self._validate_terminal_law(scenario))
        errors.extend(self._validate_bridge(scenario))
        errors.extend(self._validate_strategies(scenario))
        return len(errors) == 0, errors

    def _validate_terminal_law(self, scenario: ScenarioConfig) -> List[str]:
        if scenario.terminal_law is None:
            return [] if scenario.preset in ('linear', 'ou', 'brownian') else ["terminal_law est requise pour ce préréglage"]
        try:
            terminal_law_from_dict(scenario.terminal_law)
        except (LabException, KeyError, TypeError, ValueError) as e:
            return [f"terminal_law: {getattr(e, 'message', e)}"]
        return []

    def _validate_bridge(self, scenario: ScenarioConfig) -> List[str]:
        errors = []
        if not scenario.bridge.delta < scenario.horizon / 10.0:
            errors.append("bridge.delta doit être inférieur à T/10")
        levels = scenario.bridge.truncation_levels
        if levels is not None and any(b <= a for a, b in zip(levels, levels[1:])):
            errors.append("bridge.truncation_levels doit être strictement croissant")
        return errors

    def _validate_strategies(self, scenario: ScenarioConfig) -> List[str]:
        errors = []
        for i, strategy in enumerate(scenario.strategies):
            if strategy.kind == 'affine' and scenario.preset != 'linear':
                errors.append(f"strategies[{i}]: la stratégie affine n'est câblée que pour le préréglage linear")
            if strategy.kind == 'time_shifted_bridge' and not 0 <= strategy.shift < scenario.horizon:
                errors.append(f"strategies[{i}]: décalage hors de [0, T[")
        return errors

    def build(self, scenario: ScenarioConfig):
        """
        Construit les coefficients et la stratégie affine associée

        Returns:
            Tuple (CoefficientSet, stratégie ou None)
        """
        law = terminal_law_from_dict(scenario.terminal_law) if scenario.terminal_law else None
        g = g_map(scenario.g.kind, slope=scenario.g.slope, intercept=scenario.g.intercept)
        coeffs, strategy = build_preset(scenario.preset, scenario.parameters, law, g, scenario.horizon,
                                        _decimal(scenario.v0), _decimal(scenario.x0))
        if tuple(scenario.x_domain) != tuple(coeffs.x_domain):
            from dataclasses import replace

            coeffs = replace(coeffs, x_domain=tuple(scenario.x_domain))
        current_app.logger.info(f"🔧 Scénario {scenario.name}: préréglage {scenario.preset}")
        return coeffs, strategy

    def probe(self, scenario: ScenarioConfig, coeffs) -> ProbeGrid:
        """Grille de sondage par défaut: moyenne ± 3 écarts-types de m*"""
        law = coeffs.m_star
        spread = 3.0 * max(law.std(), 1.0)
        v_range = scenario.probe.v_range or (law.mean() - spread, law.mean() + spread)
        x_range = scenario.probe.x_range or (coeffs.x0 - spread, coeffs.x0 + spread)
        t_range = scenario.probe.t_range or (0.0, coeffs.T * 0.99)
        return ProbeGrid.rectangle(t_range, v_range, x_range, n=scenario.probe.n)

    def time_grid(self, scenario: ScenarioConfig) -> TimeGrid:
        return TimeGrid(0.0, scenario.horizon, scenario.time_grid.n_steps)

    @staticmethod
    def tolerance(value: str) -> float:
        try:
            return _decimal(value)
        except ValueError as e:
            raise ValidationException(str(e), field='tolerance')
