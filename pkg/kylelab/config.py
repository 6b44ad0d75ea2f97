"""
Configuration centralisée pour Kyle Lab
"""

import os


def _env_float(name, default):
    value = os.environ.get(name)
    return float(value) if value not in (None, '') else default


def _env_int(name, default):
    value = os.environ.get(name)
    return int(value) if value not in (None, '') else default


class Config:
    """Configuration de base du laboratoire"""

    # Configuration application
    LAB_NAME = os.environ.get('LAB_NAME', 'Kyle Lab')
    LAB_VERSION = os.environ.get('LAB_VERSION', '1.0.0')
    DEBUG = False
    TESTING = False

    # Configuration export
    EXPORT_FOLDER = os.environ.get('EXPORT_FOLDER', 'outputs')
    CSV_FLOAT_FORMAT = '%.17g'

    # Configuration logging
    LOG_LEVEL = 'INFO'
    LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
    LOG_FOLDER = os.environ.get('LOG_FOLDER', 'logs')

    # Simulation
    ALPHA_CAP = _env_float('LAB_ALPHA_CAP', 1.0e6)
    CHUNK_SIZE = _env_int('LAB_CHUNK_SIZE', 2000)
    N_WORKERS = _env_int('LAB_N_WORKERS', 1)
    LIPSCHITZ_BOUND = 50.0

    # Conditionnement et pont
    DEFAULT_N_ATOMS = 64
    DENSITY_FLOOR_REL = 1.0e-15
    DENSITY_FLOOR_ABS = 1.0e-300
    DET_FLOOR = 1.0e-14
    TIME_GUARD_FRACTION = 1.0e-3
    TRUNCATION_LEVELS = (10.0, 1.0e2, 1.0e3, 1.0e4)
    KERNEL_TABLE_STEPS = 2048
    MIN_LAW_PATHS = 1000

    # Filtrage
    ESS_THRESHOLD = 0.5
    DEGENERACY_WEIGHT = 1.0 - 1.0e-9

    # Solveurs EDP
    FIXED_POINT_TOL = 1.0e-10
    FIXED_POINT_MAX_ITER = 50
    RICCATI_S_MAX = 1.0e8
    RHO_FLOOR = 1.0e-8

    # Tournoi
    KS_GATE = 0.05
    DEGRADED_ATOMS = 16

    @staticmethod
    def init_app(app):
        """Initialisation spécifique de la configuration"""
        os.makedirs(app.config['EXPORT_FOLDER'], exist_ok=True)


class DevelopmentConfig(Config):
    """Configuration pour l'environnement de développement"""

    DEBUG = True
    LOG_LEVEL = 'DEBUG'

    @classmethod
    def init_app(cls, app):
        """Initialisation spécifique pour le développement"""
        Config.init_app(app)
        app.logger.info("🔧 Configuration développement chargée")


class ProductionConfig(Config):
    """Configuration pour les campagnes longues (journalisation fichier)"""

    LOG_LEVEL = 'WARNING'
    N_WORKERS = _env_int('LAB_N_WORKERS', 4)

    @classmethod
    def init_app(cls, app):
        """Initialisation spécifique pour la production"""
        Config.init_app(app)

        import logging
        from logging.handlers import RotatingFileHandler

        os.makedirs(app.config['LOG_FOLDER'], exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(app.config['LOG_FOLDER'], 'kylelab.log'),
            maxBytes=10240000,  # 10MB
            backupCount=10
        )
        file_handler.setLevel(logging.WARNING)
        file_handler.setFormatter(logging.Formatter(app.config['LOG_FORMAT']))
        app.logger.addHandler(file_handler)
        app.logger.info("🚀 Configuration production chargée")


class TestingConfig(Config):
    """Configuration pour les tests"""

    TESTING = True
    EXPORT_FOLDER = os.environ.get('EXPORT_FOLDER', 'outputs-test')
    LOG_LEVEL = 'WARNING'
    CHUNK_SIZE = 1000
    KERNEL_TABLE_STEPS = 1024

    @classmethod
    def init_app(cls, app):
        """Initialisation spécifique pour les tests (aucun dossier créé)"""
        app.logger.debug("🧪 Configuration test chargée")


# Mapping des configurations
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}
