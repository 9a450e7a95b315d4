import json

import pytest
import yaml

import bench_cli
from bench_cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_EVAL, EXIT_OK, RunConfig
from benchmark import OOD, TRAIN, UNSEEN, ConfigError
from toy_model import TrainingDivergedError
from trainers import HARD, SOFT

TINY_RUN = {
    'version': 1,
    'seed': 3,
    'output_dir': 'tiny',
    'benchmark': {
        'families': ['bernoulli', 'binom', 'poisson'],
        'table_train': [],
        'custom_train': [
            {'family': 'bernoulli', 'grid': {'p': [0.3, 0.7]}},
            {'family': 'binom', 'params': {'n': 3, 'p': 0.5}},
        ],
    },
    'model': {'context_length': 32, 'width': 8, 'layers': 1, 'heads': 2, 'mlp_ratio': 2},
    'training': {
        'methods': ['soft', 'hard'],
        'soft': {'decimals': 2, 'max_bins': 200, 'epochs': 1, 'batch_size': 2, 'learning_rate': 0.003},
        'hard': {'decimals': 2, 'max_bins': 200, 'epochs': 1, 'samples_per_prompt': 2, 'batch_size': 4,
                 'learning_rate': 0.003},
    },
    'evaluation': {'samples_per_prompt': 10, 'n_paths': 1, 'decimals': 2, 'max_bins': 200,
                   'splits': ['ood-test', 'unseen-param-test']},
    'ablation': {'method': 'soft', 'settings': [{'decimals': 1, 'max_bins': 50}, {'decimals': 2, 'max_bins': 200}]},
}


@pytest.fixture
def output_root(monkeypatch, tmp_path):
    root = tmp_path / 'runs'
    monkeypatch.setenv('CALIB_OUTPUT_ROOT', str(root))
    return root


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / 'tiny.yaml'
    path.write_text(yaml.safe_dump(TINY_RUN), encoding='utf-8')
    return path


def write_config(tmp_path, data, name='run.yaml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding='utf-8')
    return path


def test_smoke_profile_parses():
    run = RunConfig.from_yaml(bench_cli.DEFAULT_CONFIG)
    assert run.methods == [SOFT, HARD]
    assert run.training[SOFT].epochs == 40
    assert run.training[HARD].samples_per_prompt == 16
    assert run.training[HARD].max_bins == 16384
    assert run.eval_splits == [TRAIN, UNSEEN, OOD]
    assert run.evaluation.samples_per_prompt == 100
    assert run.training[SOFT].seed == run.seed == run.model.seed


def test_full_profile_parses():
    run = RunConfig.from_yaml(bench_cli.ROOT / 'configs' / 'full.yaml')
    assert run.benchmark.resolution == 9
    assert run.include_oracle


def test_config_hash_is_stable():
    a = RunConfig.from_dict(TINY_RUN)
    b = RunConfig.from_dict(json.loads(json.dumps(TINY_RUN)))
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 12
    c = RunConfig.from_dict({**TINY_RUN, 'seed': 4})
    assert c.config_hash() != a.config_hash()


def test_round_trip_through_dict():
    run = RunConfig.from_dict(TINY_RUN)
    again = RunConfig.from_dict(run.to_dict())
    assert again.config_hash() == run.config_hash()


@pytest.mark.parametrize('patch', [
    {'version': 2},
    {'training': {'methods': ['rl']}},
    {'evaluation': {'splits': ['holdout']}},
    {'benchmark': {'families': ['zipf']}},
    {'model': {'width': 10, 'heads': 4}},
    {'ablation': {'method': 'rl'}},
])
def test_invalid_run_configs(patch):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**TINY_RUN, **patch})


def test_overrides():
    run = RunConfig.from_dict(TINY_RUN)
    args = bench_cli.build_parser().parse_args(
        ['train', '--seed', '9', '--method-filter', 'hard', '--epochs', '7', '--resolution', '4', '--oracle'])
    updated = bench_cli.apply_overrides(run, args)
    assert updated.seed == 9
    assert updated.model.seed == 9
    assert updated.training[SOFT].seed == 9
    assert updated.training[HARD].epochs == 7
    assert updated.training[SOFT].epochs == 1
    assert updated.benchmark.resolution == 4
    assert updated.include_oracle


def test_missing_config_exits_with_config_code(output_root, tmp_path):
    assert bench_cli.main(['generate', '--config', str(tmp_path / 'nope.yaml')]) == EXIT_CONFIG


def test_bad_family_exits_with_config_code(output_root, tmp_path):
    path = write_config(tmp_path, {**TINY_RUN, 'benchmark': {'families': ['zipf']}})
    assert bench_cli.main(['generate', '--config', str(path)]) == EXIT_CONFIG


def test_eval_without_checkpoints_exits_with_eval_code(output_root, tiny_yaml):
    assert bench_cli.main(['eval', '--config', str(tiny_yaml)]) == EXIT_EVAL


def test_divergence_exit_code(output_root, tiny_yaml, monkeypatch):
    def diverge(*args, **kwargs):
        raise TrainingDivergedError("loss is nan", [{'loss': 1.0}])

    monkeypatch.setattr(bench_cli, 'train', diverge)
    assert bench_cli.main(['train', '--config', str(tiny_yaml)]) == EXIT_DIVERGED


def test_generate_writes_benchmark(output_root, tiny_yaml):
    assert bench_cli.main(['generate', '--config', str(tiny_yaml)]) == EXIT_OK
    run_dir = output_root / 'tiny'
    payload = json.loads((run_dir / 'benchmark.json').read_text(encoding='utf-8'))
    splits = [c['split'] for c in payload['configs']]
    assert splits.count(TRAIN) == 3
    assert splits.count(OOD) == 3
    # Bernoulli OOD rows become unseen tests once Bernoulli is trained; binom adds its table test
    assert splits.count(UNSEEN) == 4
    assert (run_dir / 'prompts.csv').exists()
    manifest = json.loads((run_dir / 'run_manifest.json').read_text(encoding='utf-8'))
    assert manifest['config_hash'] == payload['config_hash']


def test_full_pipeline_is_reproducible(output_root, tiny_yaml):
    assert bench_cli.main(['all', '--config', str(tiny_yaml)]) == EXIT_OK
    run_dir = output_root / 'tiny'
    first = (run_dir / 'report.json').read_bytes()
    for name in ('soft', 'hard'):
        assert (run_dir / 'checkpoints' / name / 'final.npz').exists()
        assert (run_dir / 'traces' / f'{name}_loss.csv').exists()
    for condition in ('base', 'soft', 'hard'):
        assert (run_dir / 'reports' / f'eval_{condition}.json').exists()
    report = json.loads(first)
    assert report['conditions'] == ['base', 'soft', 'hard']
    assert (run_dir / 'report.txt').read_text(encoding='utf-8').startswith('config_hash:')

    assert bench_cli.main(['all', '--config', str(tiny_yaml)]) == EXIT_OK
    assert (run_dir / 'report.json').read_bytes() == first


def test_report_stage_reads_saved_evals(output_root, tiny_yaml):
    assert bench_cli.main(['all', '--config', str(tiny_yaml)]) == EXIT_OK
    run_dir = output_root / 'tiny'
    first = (run_dir / 'report.json').read_bytes()
    assert bench_cli.main(['report', '--config', str(tiny_yaml)]) == EXIT_OK
    assert (run_dir / 'report.json').read_bytes() == first


def test_ablation_writes_one_row_per_setting(output_root, tiny_yaml):
    assert bench_cli.main(['ablate', '--config', str(tiny_yaml)]) == EXIT_OK
    payload = json.loads((output_root / 'tiny' / 'ablation.json').read_text(encoding='utf-8'))
    assert payload['method'] == SOFT
    assert [r['decimals'] for r in payload['rows']] == [1, 2]
