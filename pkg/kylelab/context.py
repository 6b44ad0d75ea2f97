"""
Accès à la configuration de l'application active
"""

from functools import wraps

from flask import current_app


def setting(key, value=None):
    """Valeur explicite si fournie, sinon valeur de current_app.config"""
    if value is not None:
        return value
    return current_app.config[key]


def with_app_context(func):
    """Enveloppe func pour qu'un thread de travail s'exécute dans le contexte de l'application active"""
    app = current_app._get_current_object()

    @wraps(func)
    def wrapper(*args, **kwargs):
        with app.app_context():
            return func(*args, **kwargs)

    return wrapper
