#!/usr/bin/env python3
"""
Test simple pour valider le setup du laboratoire Kyle Lab
"""

import os
import sys
import traceback

import pytest


def test_imports():
    """Test des imports nécessaires"""
    print("🔍 Test des imports...")

    import numpy
    import scipy
    print(f"✅ numpy {numpy.__version__}, scipy {scipy.__version__}")

    from kylelab import create_lab  # noqa: F401
    print("✅ Lab factory import: OK")

    from kylelab.config import Config, DevelopmentConfig  # noqa: F401
    print("✅ Configuration import: OK")


def test_lab_creation():
    """Test de création du laboratoire"""
    print("\n🏗️ Test de création du laboratoire...")

    from flask import current_app

    from kylelab import create_lab

    app = create_lab('testing')
    with app.app_context():
        assert current_app._get_current_object() is app
        assert app.testing
        assert not app.debug
        assert current_app.config['CONFIG_NAME'] == 'testing'
        assert current_app.config['CSV_FLOAT_FORMAT'] == '%.17g'
        print(f"✅ Version: {app.config['LAB_VERSION']}")


def test_unknown_config_falls_back_to_default():
    """Un nom de configuration inconnu charge la configuration par défaut"""
    from kylelab import create_lab

    app = create_lab('inconnue')
    assert app.debug
    assert app.config['LOG_LEVEL'] == 'DEBUG'


def test_stages(app):
    """Test de l'enregistrement des étapes"""
    print("\n🛣️ Test des étapes...")

    from kylelab.services.pipeline import STAGE_ORDER

    stages = app.extensions['kylelab']['stages']
    assert list(stages) == list(STAGE_ORDER)
    for name in STAGE_ORDER:
        assert callable(stages[name])
        print(f"✅ Étape {name}: OK")


@pytest.mark.parametrize('exc_name, expected', [
    ('ConfigurationException', 1),
    ('ValidationException', 1),
    ('LabException', 1),
    ('DomainException', 2),
    ('SingularCovarianceException', 2),
    ('DegeneratePhiException', 2),
    ('ImproperConditioningException', 2),
    ('CompatibilityViolatedException', 2),
    ('ShapeException', 2),
    ('InsufficientSampleException', 2),
    ('SolverDivergedException', 2),
])
def test_error_handlers(exc_name, expected):
    """Chaque famille d'erreurs se traduit en code de sortie"""
    from kylelab import handle_exception
    from kylelab.utils import exceptions

    exc = getattr(exceptions, exc_name)()
    assert handle_exception(exc) == expected


def test_io_error_maps_to_config_exit():
    """Les erreurs d'entrée/sortie sortent en code 1"""
    from kylelab import handle_exception

    assert handle_exception(FileNotFoundError('absent.json')) == 1


def test_unmapped_exception_is_reraised():
    """Une exception sans gestionnaire est relancée"""
    from kylelab import handle_exception

    with pytest.raises(ZeroDivisionError):
        handle_exception(ZeroDivisionError('x'))


def test_config_files():
    """Test des fichiers de configuration"""
    print("\n⚙️ Test des fichiers de configuration...")

    root = os.path.dirname(os.path.abspath(__file__))
    config_files = [
        'requirements.txt',
        'env.example',
        'run.py',
        'README.md',
        'scenarios/brownian.json',
        'scenarios/linear.json',
        'scenarios/linear_tan.json',
    ]

    missing = [name for name in config_files if not os.path.exists(os.path.join(root, name))]
    for name in config_files:
        print(f"{'❌' if name in missing else '✅'} {name}")
    assert not missing


def main():
    """Test principal"""
    print("🚀 Kyle Lab - Tests de validation")
    print("=" * 50)

    # Ajouter le répertoire actuel au Python path
    sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

    from kylelab import create_lab

    tests = [
        ("Imports", lambda: test_imports()),
        ("Création Lab", lambda: test_lab_creation()),
        ("Étapes", lambda: test_stages(create_lab('testing'))),
        ("Fichiers Config", lambda: test_config_files()),
    ]

    results = []

    for test_name, test_func in tests:
        try:
            test_func()
            results.append((test_name, True))
        except Exception as e:
            print(f"❌ Erreur dans {test_name}: {e}")
            traceback.print_exc()
            results.append((test_name, False))

    # Résumé
    print("\n" + "=" * 50)
    print("📊 RÉSUMÉ DES TESTS")
    print("=" * 50)

    passed = sum(1 for _, result in results if result)
    for test_name, result in results:
        status = "✅ PASSÉ" if result else "❌ ÉCHEC"
        print(f"{test_name:20} : {status}")

    print(f"\n🎯 Résultat: {passed}/{len(results)} tests passés")
    if passed == len(results):
        print("🎉 Tous les tests sont passés ! Le laboratoire est prêt.")
        print("\n🚀 Pour lancer un scénario:")
        print("   python run.py all --config scenarios/brownian.json")
    else:
        print("⚠️ Certains tests ont échoué. Vérifiez la configuration.")

    return passed == len(results)


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
