"""
Flux aléatoires reproductibles indexés par (graine, étape, choc, trajectoire)

Chaque trajectoire tire ses incréments d'un générateur Philox dont la clé
dépend de (graine, étape, choc) et dont le compteur est décalé par l'indice
global de la trajectoire: le découpage en blocs ou en workers ne change pas
les tirages.
"""

import hashlib

import numpy as np

from .exceptions import ValidationException


def stage_id(stage: str) -> int:
    digest = hashlib.sha256(stage.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def _key(seed: int, stage: str, shock: int) -> np.ndarray:
    if seed is None or int(seed) < 0:
        raise ValidationException("Une graine explicite et positive est requise", field='seed')
    seq = np.random.SeedSequence([int(seed), stage_id(stage), int(shock)])
    return seq.generate_state(2, dtype=np.uint64)


def path_generator(seed: int, stage: str, shock: int, path_index: int) -> np.random.Generator:
    counter = np.array([0, 0, int(path_index), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed, stage, shock), counter=counter))


def path_normals(seed: int, stage: str, shock: int, path_offset: int, n_paths: int, n_steps: int) -> np.ndarray:
    """
    Normales standard de forme (n_paths, n_steps)

    Args:
        seed: Graine maîtresse
        stage: Nom de l'étape (par ex. 'paths', 'tournament')
        shock: Indice du choc (0 pour B1, 1 pour B2)
        path_offset: Indice global de la première trajectoire
        n_paths: Nombre de trajectoires
        n_steps: Nombre de pas

    Returns:
        Tableau de normales
    """
    key = _key(seed, stage, shock)
    out = np.empty((n_paths, n_steps))
    for row in range(n_paths):
        counter = np.array([0, 0, path_offset + row, 0], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
        out[row] = gen.standard_normal(n_steps)
    return out


def step_generator(seed: int, stage: str, step: int) -> np.random.Generator:
    """Générateur propre à un pas de temps (filtre particulaire)"""
    if seed is None or int(seed) < 0:
        raise ValidationException("Une graine explicite et positive est requise", field='seed')
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stage_id(stage), int(step)])))
