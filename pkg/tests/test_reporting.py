import json

import pandas as pd

from reports import reporting


def test_reports_is_a_regular_package():
    import reports
    assert reports.__file__ is not None and reports.__file__.endswith('__init__.py')


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv('CALIB_OUTPUT_ROOT', str(tmp_path / 'out'))
    assert reporting.output_root() == tmp_path / 'out'
    monkeypatch.delenv('CALIB_OUTPUT_ROOT')
    assert reporting.output_root() == reporting.DEFAULT_OUTPUT_ROOT


def test_ensure_dirs(tmp_path):
    run_dir = reporting.ensure_dirs(tmp_path / 'run')
    assert sorted(p.name for p in run_dir.iterdir()) == ['checkpoints', 'reports', 'traces']


def test_json_is_canonical(tmp_path):
    path = reporting.write_json(tmp_path / 'a' / 'x.json', {'b': 1, 'a': [1.5, None]})
    text = path.read_text(encoding='utf-8')
    assert text == '{\n  "a": [\n    1.5,\n    null\n  ],\n  "b": 1\n}\n'
    assert not (tmp_path / 'a' / 'x.json.tmp').exists()
    assert reporting.read_json(path) == {'a': [1.5, None], 'b': 1}


def test_read_json_falls_back(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json', encoding='utf-8')
    assert reporting.read_json(bad, default={}) == {}
    assert reporting.read_json(tmp_path / 'missing.json') is None


def test_write_text_adds_newline(tmp_path):
    path = reporting.write_text(tmp_path / 'r.txt', 'hello')
    assert path.read_text(encoding='utf-8') == 'hello\n'


def test_append_csv_rows_writes_header_once(tmp_path):
    path = tmp_path / 'traces' / 'loss.csv'
    columns = ['epoch', 'step', 'loss']
    reporting.append_csv_rows(path, [{'epoch': 1, 'step': 1, 'loss': 0.5}], columns)
    reporting.append_csv_rows(path, [{'epoch': 2, 'step': 2, 'loss': 0.25, 'extra': 'x'}], columns)
    reporting.append_csv_rows(path, [], columns)
    frame = pd.read_csv(path)
    assert list(frame.columns) == columns
    assert frame['loss'].tolist() == [0.5, 0.25]


def test_empty_rows_do_not_create_file(tmp_path):
    path = reporting.append_csv_rows(tmp_path / 'none.csv', [], ['a'])
    assert not path.exists()


def test_manifest_upsert_merges(tmp_path):
    reporting.upsert_run_manifest(tmp_path, {
        'config_hash': 'aaa', 'seed': 0,
        'stages': {'generate': {'configs': 20}},
        'artifacts': ['prompts.csv', 'benchmark.json'],
    })
    path = reporting.upsert_run_manifest(tmp_path, {
        'config_hash': 'bbb',
        'stages': {'generate': {'note': 'rerun'}, 'train_soft': {'steps': 200}},
        'artifacts': ['benchmark.json', 'traces/soft_loss.csv'],
    })
    manifest = json.loads(path.read_text(encoding='utf-8'))
    assert manifest['config_hash'] == 'bbb'
    assert manifest['seed'] == 0
    assert manifest['stages'] == {'generate': {'configs': 20, 'note': 'rerun'}, 'train_soft': {'steps': 200}}
    assert manifest['artifacts'] == ['benchmark.json', 'prompts.csv', 'traces/soft_loss.csv']


def test_relative_artifacts(tmp_path):
    inside = tmp_path / 'reports' / 'eval_base.json'
    outside = tmp_path.parent / 'elsewhere.json'
    assert reporting.relative_artifacts(tmp_path, [inside, None, outside]) == [
        'reports/eval_base.json', outside.as_posix()]
