"""
Exceptions personnalisées pour Kyle Lab
"""


class LabException(Exception):
    """Exception de base pour le laboratoire"""

    def __init__(self, message="Une erreur s'est produite dans le laboratoire", code=None):
        self.message = message
        self.code = code
        super().__init__(self.message)


class ValidationException(LabException):
    """Exception spécifique aux erreurs de validation (arguments, scénarios)"""

    def __init__(self, message="Erreur de validation des données", code="VALIDATION_ERROR", field=None):
        self.field = field
        super().__init__(message, code)


class ConfigurationException(LabException):
    """Exception spécifique aux erreurs de configuration"""

    def __init__(self, message="Erreur de configuration", code="CONFIG_ERROR", setting=None):
        self.setting = setting
        super().__init__(message, code)


class DomainException(LabException):
    """Point hors du domaine de calcul (inversion de g, garde de division)"""

    def __init__(self, message="Point hors du domaine de calcul", code="DOMAIN_ERROR", value=None):
        self.value = value
        super().__init__(message, code)


class SingularCovarianceException(LabException):
    """Covariance gaussienne quasi singulière"""

    def __init__(self, message="Covariance singulière", code="SINGULAR_COVARIANCE", determinant=None):
        self.determinant = determinant
        super().__init__(message, code)


class DegeneratePhiException(LabException):
    """La fonction de conditionnement est non finie ou sous le plancher"""

    def __init__(self, message="Fonction phi dégénérée", code="DEGENERATE_PHI", time=None):
        self.time = time
        super().__init__(message, code)


class ImproperConditioningException(LabException):
    """Atome de conditionnement hors du support de la densité"""

    def __init__(self, message="Conditionnement impropre", code="IMPROPER_CONDITIONING", atom=None):
        self.atom = atom
        super().__init__(message, code)


class SolverDivergedException(LabException):
    """Échec de convergence d'un solveur itératif ou d'une EDO"""

    def __init__(self, message="Le solveur a divergé", code="SOLVER_DIVERGED", time_slice=None):
        self.time_slice = time_slice
        super().__init__(message, code)


class CompatibilityViolatedException(LabException):
    """Une condition de compatibilité n'est pas satisfaite"""

    def __init__(self, message="Condition de compatibilité violée", code="COMPATIBILITY_VIOLATED", residual=None):
        self.residual = residual
        super().__init__(message, code)


class ShapeException(LabException):
    """Les coefficients n'ont pas la forme requise par un cas"""

    def __init__(self, message="Forme des coefficients non admissible", code="SHAPE_ERROR", dependence=None):
        self.dependence = dependence
        super().__init__(message, code)


class InsufficientSampleException(LabException):
    """Pas assez de trajectoires pour un test statistique"""

    def __init__(self, message="Échantillon insuffisant", code="INSUFFICIENT_SAMPLE", available=None, required=None):
        self.available = available
        self.required = required
        super().__init__(message, code)
