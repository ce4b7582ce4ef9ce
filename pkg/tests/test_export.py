"""Тесты отчётов и манифеста"""

import json
from io import BytesIO

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from src.export.excel_export import export_report_to_excel, safe_float, safe_str
from src.export.manifest import RunManifest, load_manifest, manifest_path
from src.export.reports import write_report
from src.numerics.errors import ConfigError


@pytest.fixture
def report_frame():
    return pd.DataFrame({'resolution': [33, 65], 'mode': ['direct', 'query'], 'mean_rel_l2': [0.02, 0.04]})


class TestSafeConversions:

    @pytest.mark.parametrize('value, expected', [
        (1, 1.0), ('2.5', 2.5), (np.float64(3.0), 3.0), (np.int64(4), 4.0),
        (None, None), (float('nan'), None), (float('inf'), None), ('abc', None),
    ])
    def test_safe_float(self, value, expected):
        assert safe_float(value) == expected

    @pytest.mark.parametrize('value, expected', [(None, ''), (float('nan'), ''), ('min', 'min'), (3, '3')])
    def test_safe_str(self, value, expected):
        assert safe_str(value) == expected


class TestExcel:

    def test_layout(self, report_frame):
        wb = load_workbook(BytesIO(export_report_to_excel(report_frame, "Суперразрешение", ['mean_rel_l2'])))
        ws = wb.active
        assert ws['A1'].value == "Суперразрешение"
        assert [c.value for c in ws[3]] == ['resolution', 'mode', 'mean_rel_l2']
        assert ws['B5'].value == 'query'
        assert ws['A6'].value == "СРЕДНЕЕ:"
        assert ws['C6'].value == pytest.approx(0.03)

    def test_no_summary(self, report_frame):
        ws = load_workbook(BytesIO(export_report_to_excel(report_frame, "Без итога"))).active
        assert ws['A6'].value is None


class TestWriteReport:

    def test_csv(self, report_frame, tmp_path):
        path = write_report(report_frame, tmp_path / 'sub' / 'r.csv')
        pd.testing.assert_frame_equal(pd.read_csv(path), report_frame)

    def test_xlsx(self, report_frame, tmp_path):
        path = write_report(report_frame, tmp_path / 'r.xlsx', title="Отчёт", summary_columns=['mean_rel_l2'])
        assert load_workbook(path).active['A1'].value == "Отчёт"


class TestManifest:

    def test_paths(self, tmp_path):
        assert manifest_path(tmp_path / 'data.onod', is_dir=False) == tmp_path / 'data.onod.manifest.json'
        assert manifest_path(tmp_path / 'run', is_dir=True) == tmp_path / 'run' / 'manifest.json'

    def test_round_trip(self, tmp_path):
        manifest = RunManifest('generate-data', ['generate-data', '--n', '4'], {'problem': 'poisson1d'}, seed=7,
                               artifacts={'dataset': 'd.onod'})
        path = manifest.finish(tmp_path / 'm.json')
        loaded = load_manifest(path)
        assert loaded.argv == manifest.argv
        assert loaded.config == {'problem': 'poisson1d'}
        assert loaded.seed == 7
        assert loaded.wall_seconds is not None

    def test_not_json(self, tmp_path):
        path = tmp_path / 'm.json'
        path.write_text('{oops', encoding='utf-8')
        with pytest.raises(ConfigError):
            load_manifest(path)

    def test_missing_keys(self, tmp_path):
        path = tmp_path / 'm.json'
        path.write_text(json.dumps({'subcommand': 'train'}), encoding='utf-8')
        with pytest.raises(ConfigError):
            load_manifest(path)
