"""
Intégration Runge-Kutta d'ordre 4 pour les petits systèmes d'EDO
"""

import numpy as np


def rk4_path(fn, y0, nodes, stop=None):
    """
    Intègre y' = fn(t, y) sur les nœuds fournis (croissants ou décroissants)

    Args:
        fn: Second membre fn(t, y) -> tableau de même forme que y
        y0: Condition au premier nœud
        nodes: Nœuds de temps
        stop: Prédicat optionnel stop(t, y) qui interrompt l'intégration

    Returns:
        Tuple (valeurs aux nœuds, indice du premier nœud où stop est vrai ou None)
    """
    nodes = np.asarray(nodes, dtype=float)
    y = np.asarray(y0, dtype=float)
    out = np.empty((len(nodes),) + y.shape)
    out[0] = y
    for j in range(len(nodes) - 1):
        t, h = nodes[j], nodes[j + 1] - nodes[j]
        k1 = fn(t, y)
        k2 = fn(t + h / 2, y + h * k1 / 2)
        k3 = fn(t + h / 2, y + h * k2 / 2)
        k4 = fn(t + h, y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        out[j + 1] = y
        if stop is not None and stop(nodes[j + 1], y):
            out[j + 2:] = np.nan
            return out, j + 1
    return out, None
