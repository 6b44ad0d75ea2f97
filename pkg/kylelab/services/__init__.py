"""
Services package pour Kyle Lab

Ce package contient les services du laboratoire :
- sde_core, conditioning, bridge, affine, filtering, pricing_pde, equilibrium_lab : calculs
- Validation Service : schéma et contrôles des scénarios
- Export Service : écritures atomiques et manifeste de run
- pipeline : étapes exécutées par la ligne de commande
"""

from .export_service import ExportService
from .validation_service import ScenarioConfig, ValidationService

__all__ = ['ExportService', 'ScenarioConfig', 'ValidationService']
