#!/usr/bin/env python3
"""
Point d'entrée principal pour Kyle Lab
"""

from dotenv import load_dotenv

# Charger les variables d'environnement avant la configuration du laboratoire
load_dotenv()

from kylelab.commands import cli  # noqa: E402

if __name__ == '__main__':
    cli()
