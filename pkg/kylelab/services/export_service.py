"""
Service d'export pour Kyle Lab

Écritures atomiques (fichier temporaire puis renommage), CSV préfixés par le
hash de configuration, JSON déterministes et manifeste de run.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from flask import current_app
import numpy as np
import pandas as pd

from ..context import setting
from ..utils.exceptions import ConfigurationException

MANIFEST_NAME = 'manifest.json'


def _jsonable(value: Any):
    """Conversion des types numpy pour json.dumps"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if hasattr(value, 'to_dict'):
        return value.to_dict()
    raise TypeError(f"Type non sérialisable: {type(value).__name__}")


def _sanitize(value: Any):
    # NaN et infinis n'existent pas en JSON strict
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, (float, np.floating)):
        f = float(value)
        return f if np.isfinite(f) else None
    if isinstance(value, (np.ndarray, np.generic)) or hasattr(value, 'to_dict'):
        return _sanitize(_jsonable(value))
    return value


def canonical_json(value: Any, indent: Optional[int] = 2) -> str:
    return json.dumps(_sanitize(value), sort_keys=True, indent=indent, ensure_ascii=False, allow_nan=False)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write(path: str, text: str):
    """Écrit text dans path via un fichier temporaire du même dossier"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@dataclass
class RunManifest:
    """Index des fichiers produits par un run"""

    config_hash: str
    version: str
    started_at: str
    finished_at: Optional[str] = None
    stages: Dict[str, Dict] = field(default_factory=dict)
    files: Dict[str, str] = field(default_factory=dict)

    def record_stage(self, name: str, passed: bool, exit_code: int, warnings: Optional[List[str]] = None):
        self.stages[name] = {'passed': bool(passed), 'exit_code': int(exit_code), 'warnings': list(warnings or [])}

    @property
    def passed(self) -> bool:
        return all(stage['passed'] for stage in self.stages.values())

    def to_dict(self) -> Dict:
        return {
            'config_hash': self.config_hash,
            'version': self.version,
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'passed': self.passed,
            'stages': self.stages,
            'files': [{'name': name, 'sha256': digest} for name, digest in sorted(self.files.items())],
        }


class ExportService:
    """Service pour l'écriture des artefacts d'un run"""

    def __init__(self, output_dir: Optional[str], config_hash: str, version: Optional[str] = None):
        self.output_dir = output_dir or setting('EXPORT_FOLDER')
        self.config_hash = config_hash
        self.manifest = RunManifest(config_hash, version or current_app.config['LAB_VERSION'], _now())

    def prepare(self):
        """
        Crée le dossier de sortie et refuse un dossier issu d'une autre configuration

        Raises:
            ConfigurationException: si le manifeste existant porte un autre hash
        """
        os.makedirs(self.output_dir, exist_ok=True)
        existing = os.path.join(self.output_dir, MANIFEST_NAME)
        if os.path.exists(existing):
            try:
                with open(existing, 'r', encoding='utf-8') as handle:
                    previous = json.load(handle).get('config_hash')
            except (OSError, ValueError):
                previous = None
            if previous != self.config_hash:
                raise ConfigurationException(
                    f"Le dossier {self.output_dir} contient les sorties d'une autre configuration",
                    setting='output_dir')
        current_app.logger.debug(f"📁 Dossier de sortie: {os.path.abspath(self.output_dir)}")
        return self

    def _register(self, name: str) -> str:
        path = os.path.join(self.output_dir, name)
        self.manifest.files[name] = sha256_file(path)
        return path

    def write_json(self, name: str, payload: Dict) -> str:
        """Rapport JSON déterministe (clé config_hash ajoutée)"""
        body = dict(payload)
        body['config_hash'] = self.config_hash
        atomic_write(os.path.join(self.output_dir, name), canonical_json(body) + '\n')
        return self._register(name)

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        """CSV précédé d'une ligne de commentaire '# config_hash=...'"""
        body = frame.to_csv(index=False, float_format=current_app.config['CSV_FLOAT_FORMAT'], lineterminator='\n')
        atomic_write(os.path.join(self.output_dir, name), f"# config_hash={self.config_hash}\n{body}")
        return self._register(name)

    def finalize(self) -> str:
        self.manifest.finished_at = _now()
        path = os.path.join(self.output_dir, MANIFEST_NAME)
        atomic_write(path, canonical_json(self.manifest.to_dict()) + '\n')
        current_app.logger.info(f"📦 Manifeste écrit ({len(self.manifest.files)} fichiers)")
        return path


def read_csv(path: str) -> pd.DataFrame:
    """Relit un CSV exporté (ligne de hash ignorée)"""
    return pd.read_csv(path, comment='#')


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')
