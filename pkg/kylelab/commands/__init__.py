"""
Package des commandes pour Kyle Lab
"""

from .main import cli

__all__ = ['cli']
