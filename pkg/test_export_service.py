"""
Tests du service d'export: JSON canonique, écritures atomiques et manifeste
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from kylelab.services.export_service import (
    MANIFEST_NAME, ExportService, atomic_write, canonical_json, read_csv, sha256_file
)
from kylelab.utils.exceptions import ConfigurationException

HASH = 'a' * 64


@pytest.fixture
def exporter(tmp_path):
    return ExportService(str(tmp_path / 'run'), HASH).prepare()


class TestCanonicalJson:
    """Sérialisation déterministe"""

    def test_sorted_and_numpy_aware(self):
        text = canonical_json({'b': np.float64(1.5), 'a': np.arange(3), 'c': np.bool_(True)}, indent=None)
        assert text == '{"a": [0, 1, 2], "b": 1.5, "c": true}'

    def test_non_finite_become_null(self):
        payload = json.loads(canonical_json({'x': float('nan'), 'y': [np.inf, 1.0]}))
        assert payload == {'x': None, 'y': [None, 1.0]}

    def test_objects_with_to_dict(self):
        class Report:
            def to_dict(self):
                return {'passed': np.bool_(False)}

        assert json.loads(canonical_json({'r': Report()})) == {'r': {'passed': False}}


class TestAtomicWrite:
    """Écriture par renommage"""

    def test_creates_directories_without_leftovers(self, tmp_path):
        path = tmp_path / 'deep' / 'file.txt'
        atomic_write(str(path), 'contenu\n')
        assert path.read_text(encoding='utf-8') == 'contenu\n'
        assert os.listdir(path.parent) == ['file.txt']

    def test_replaces_existing_file(self, tmp_path):
        path = tmp_path / 'file.txt'
        atomic_write(str(path), 'ancien')
        atomic_write(str(path), 'nouveau')
        assert path.read_text(encoding='utf-8') == 'nouveau'


class TestExportService:
    """Artefacts d'un run"""

    def test_json_carries_hash(self, exporter):
        path = exporter.write_json('report.json', {'passed': True})
        with open(path, encoding='utf-8') as handle:
            body = json.load(handle)
        assert body == {'passed': True, 'config_hash': HASH}
        assert exporter.manifest.files['report.json'] == sha256_file(path)

    def test_csv_header_and_reload(self, exporter):
        frame = pd.DataFrame({'t': [0.0, 0.5], 'V': [0.1, 1.0 / 3.0]})
        path = exporter.write_csv('paths.csv', frame)
        with open(path, encoding='utf-8') as handle:
            assert handle.readline() == f'# config_hash={HASH}\n'
        reloaded = read_csv(path)
        assert list(reloaded.columns) == ['t', 'V']
        assert reloaded['V'].iloc[1] == 1.0 / 3.0

    def test_manifest(self, exporter):
        exporter.write_json('b.json', {})
        exporter.write_json('a.json', {})
        exporter.manifest.record_stage('validate', True, 0)
        exporter.manifest.record_stage('bridge', False, 2, ['trop de troncatures'])
        with open(exporter.finalize(), encoding='utf-8') as handle:
            manifest = json.load(handle)
        assert manifest['config_hash'] == HASH
        assert [f['name'] for f in manifest['files']] == ['a.json', 'b.json']
        assert manifest['passed'] is False
        assert manifest['stages']['bridge'] == {'passed': False, 'exit_code': 2,
                                                'warnings': ['trop de troncatures']}
        assert manifest['finished_at'] is not None

    def test_same_hash_reuses_directory(self, exporter):
        exporter.finalize()
        ExportService(exporter.output_dir, HASH).prepare()

    def test_other_hash_is_refused(self, exporter):
        exporter.finalize()
        with pytest.raises(ConfigurationException) as info:
            ExportService(exporter.output_dir, 'b' * 64).prepare()
        assert info.value.setting == 'output_dir'

    def test_default_folder(self, config):
        assert ExportService(None, HASH).output_dir == config['EXPORT_FOLDER']

    def test_deterministic_bytes(self, tmp_path):
        payload = {'values': np.linspace(0.0, 1.0, 7), 'name': 'brownian'}
        first = ExportService(str(tmp_path / 'one'), HASH).prepare().write_json('r.json', payload)
        second = ExportService(str(tmp_path / 'two'), HASH).prepare().write_json('r.json', payload)
        assert sha256_file(first) == sha256_file(second)
        assert os.path.basename(first) != MANIFEST_NAME
