"""
Factory pattern pour le laboratoire Kyle Lab
"""

import logging

from flask import Flask, current_app
from flask.logging import default_handler

from .config import config
from .utils.exceptions import (
    LabException, ConfigurationException, ValidationException, DomainException,
    SingularCovarianceException, DegeneratePhiException, ImproperConditioningException,
    CompatibilityViolatedException, ShapeException, InsufficientSampleException, SolverDivergedException
)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_CHECK_FAILED = 2

# Échecs numériques ou de vérification: le run se termine en échec de contrôle
CHECK_FAILURES = (
    DomainException, SingularCovarianceException, DegeneratePhiException, ImproperConditioningException,
    CompatibilityViolatedException, ShapeException, InsufficientSampleException, SolverDivergedException,
)


def create_lab(config_name='development'):
    """
    Factory function pour créer le laboratoire

    Args:
        config_name (str): Nom de la configuration ('development', 'production', 'testing')

    Returns:
        Flask: Application Flask configurée (étapes et codes de sortie dans app.extensions)
    """
    app = Flask(__name__)

    config_class = config.get(config_name, config['default'])
    app.config.from_object(config_class)
    app.config['CONFIG_NAME'] = config_name

    # Configuration du logging
    setup_logging(app)

    # Étapes du pipeline
    register_stages(app)

    # Codes de sortie
    register_error_handlers(app)

    config_class.init_app(app)

    app.logger.info(f"✅ Laboratoire initialisé en mode {config_name}")
    return app


def setup_logging(app):
    """Configure le système de logging"""
    app.logger.setLevel(getattr(logging, app.config.get('LOG_LEVEL', 'INFO')))
    default_handler.setFormatter(logging.Formatter(app.config['LOG_FORMAT']))


def register_stages(app):
    """Enregistre les étapes du pipeline"""
    from .services.pipeline import STAGES

    app.extensions.setdefault('kylelab', {})['stages'] = dict(STAGES)
    app.logger.debug("🛣️ Étapes enregistrées")


def register_error_handlers(app):
    """Associe chaque famille d'erreurs à un code de sortie"""
    codes = {
        ConfigurationException: EXIT_CONFIG_ERROR,
        ValidationException: EXIT_CONFIG_ERROR,
        OSError: EXIT_CONFIG_ERROR,
        LabException: EXIT_CONFIG_ERROR,
    }
    codes.update({klass: EXIT_CHECK_FAILED for klass in CHECK_FAILURES})
    app.extensions.setdefault('kylelab', {})['exit_codes'] = codes
    app.logger.debug("❌ Gestionnaires d'erreurs enregistrés")


def handle_exception(error):
    """
    Traduit une exception en code de sortie selon l'application active

    Args:
        error: Exception levée par une étape

    Returns:
        Code de sortie du processus
    """
    codes = current_app.extensions['kylelab']['exit_codes']
    for klass in type(error).__mro__:
        if klass in codes:
            code = codes[klass]
            message = getattr(error, 'message', str(error))
            if code == EXIT_CHECK_FAILED:
                current_app.logger.warning(f"Contrôle en échec ({error.code}): {message}")
            else:
                current_app.logger.error(f"Erreur ({type(error).__name__}): {message}")
            return code
    raise error


__all__ = ['create_lab', 'handle_exception', 'EXIT_OK', 'EXIT_CONFIG_ERROR', 'EXIT_CHECK_FAILED']
