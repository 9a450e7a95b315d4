from collections import Counter
from pathlib import Path

import pytest
import yaml

import benchmark
import dist_engine
from benchmark import (
    OOD, TRAIN, UNSEEN, BenchmarkGrid, ConfigError, PromptConfig, check_split_hygiene, expected_train_count,
    generate_benchmark, render_prompt, split_configs, table_train_params,
)
from dist_engine import DistributionSpec

SMOKE_PATH = Path(__file__).resolve().parents[1] / 'configs' / 'smoke.yaml'


@pytest.fixture(scope='module')
def full_benchmark():
    return generate_benchmark(BenchmarkGrid())


@pytest.fixture
def smoke_grid():
    with open(SMOKE_PATH, 'r', encoding='utf-8') as f:
        return BenchmarkGrid.from_dict(yaml.safe_load(f)['benchmark'])


def test_family_table_covers_engine():
    table = benchmark.load_family_table()
    assert set(table['families']) == set(dist_engine.family_names())
    assert benchmark.ood_families() == ['bernoulli', 'poisson', 'maxwell', 'truncnorm', 'chi', 'weibull_min']


def test_render_prompt_examples():
    assert render_prompt(DistributionSpec('norm', {'mu': 3.5, 'sigma': 3})) == (
        "Generate exactly ONE random number from a Gaussian distribution with parameters mu=3.5, sigma=3. "
        "Output ONLY the number.")
    assert render_prompt(DistributionSpec('bernoulli', {'p': 0.5})) == (
        "Generate exactly ONE random number from a Bernoulli distribution with parameters p=0.5. "
        "Output ONLY the number.")


def test_format_param_value():
    assert benchmark.format_param_value(3.0) == '3'
    assert benchmark.format_param_value(0.125) == '0.125'
    assert benchmark.format_param_value(-1.375) == '-1.375'


def test_render_prompt_is_injective(full_benchmark):
    prompts = [c.prompt for c in full_benchmark]
    assert len(set(prompts)) == len(prompts)


def test_train_count_at_default_resolution(full_benchmark):
    assert expected_train_count(9) == 1906
    assert len(split_configs(full_benchmark, TRAIN)) == 1906


def test_train_count_formula():
    for r in (2, 3, 5):
        assert expected_train_count(r) == 20 * r * r + 11 * r + 187


def test_full_benchmark_splits(full_benchmark):
    counts = Counter(c.split for c in full_benchmark)
    assert counts[OOD] == 18
    assert counts[UNSEEN] == 24
    ood = split_configs(full_benchmark, OOD)
    assert {c.family for c in ood} == set(benchmark.ood_families())
    bernoulli = [c for c in ood if c.family == 'bernoulli']
    assert [c.params['p'] for c in bernoulli] == [0.1, 0.5, 0.9]
    assert [c.config_id for c in bernoulli] == ['bernoulli-ood-000', 'bernoulli-ood-001', 'bernoulli-ood-002']


def test_split_hygiene_holds(full_benchmark):
    check_split_hygiene(full_benchmark)
    train_specs = {c.spec for c in split_configs(full_benchmark, TRAIN)}
    trained = {c.family for c in split_configs(full_benchmark, TRAIN)}
    assert not train_specs & {c.spec for c in full_benchmark if c.split != TRAIN}
    assert not trained & set(benchmark.ood_families())


def test_generation_is_deterministic(smoke_grid):
    first = [c.to_dict() for c in generate_benchmark(smoke_grid)]
    second = [c.to_dict() for c in generate_benchmark(smoke_grid)]
    assert first == second


def test_hypergeom_counts_round_half_up():
    params = table_train_params('hypergeom', 9)
    assert len(params) == 45
    ks = {(p['M'], p['N']): set() for p in params}
    for p in params:
        ks[(p['M'], p['N'])].add(p['K'])
    assert ks[(30.0, 5.0)] == {6.0, 11.0, 15.0, 20.0, 24.0}
    assert ks[(50.0, 5.0)] == {10.0, 18.0, 25.0, 33.0, 40.0}
    assert all(float(p['K']).is_integer() for p in params)


def test_range_axes_are_evenly_spaced():
    params = table_train_params('uniform', 3)
    assert [(p['a'], p['w']) for p in params] == [
        (-5.0, 1.0), (-5.0, 3.0), (-5.0, 5.0), (-1.5, 1.0), (-1.5, 3.0), (-1.5, 5.0),
        (2.0, 1.0), (2.0, 3.0), (2.0, 5.0)]


def test_smoke_grid_layout(smoke_grid):
    configs = generate_benchmark(smoke_grid)
    train = split_configs(configs, TRAIN)
    assert len(train) == 20
    assert Counter(c.family for c in train) == {'uniform': 9, 'bernoulli': 5, 'binom': 6}
    unseen = split_configs(configs, UNSEEN)
    assert sorted(c.config_id for c in unseen) == [
        'bernoulli-up-000', 'bernoulli-up-001', 'binom-up-000', 'binom-up-001', 'uniform-up-000']
    # p=0.5 duplicates a trained Bernoulli and is dropped
    assert sorted(c.params['p'] for c in unseen if c.family == 'bernoulli') == [0.1, 0.9]
    ood = split_configs(configs, OOD)
    assert [c.family for c in ood] == ['poisson'] * 3


def test_untrained_family_test_rows_are_skipped():
    grid = BenchmarkGrid(families=['uniform', 'norm'], resolution=2, table_train=['uniform'])
    configs = generate_benchmark(grid)
    assert {c.family for c in configs} == {'uniform'}


def test_unknown_family_is_a_config_error():
    with pytest.raises(ConfigError):
        BenchmarkGrid.from_dict({'families': ['zipf']})
    with pytest.raises(ConfigError):
        generate_benchmark(BenchmarkGrid(families=['uniform'], custom_train=[{'family': 'zipf', 'params': {}}]))


def test_invalid_custom_parameters_are_config_errors():
    grid = BenchmarkGrid(families=['bernoulli'], custom_train=[{'family': 'bernoulli', 'params': {'p': 1.5}}])
    with pytest.raises(ConfigError):
        generate_benchmark(grid)


def test_bad_resolution():
    with pytest.raises(ConfigError):
        BenchmarkGrid.from_dict({'resolution': 0})


def test_hygiene_rejects_leaks():
    spec = DistributionSpec('uniform', {'a': 0, 'w': 1})
    leaked = [
        PromptConfig('uniform-tr-000', spec, TRAIN, render_prompt(spec)),
        PromptConfig('uniform-up-000', spec, UNSEEN, render_prompt(spec)),
    ]
    with pytest.raises(ConfigError):
        check_split_hygiene(leaked)
    ood_from_trained = [
        PromptConfig('bernoulli-tr-000', DistributionSpec('bernoulli', {'p': 0.2}), TRAIN, ''),
        PromptConfig('bernoulli-ood-000', DistributionSpec('bernoulli', {'p': 0.1}), OOD, ''),
    ]
    with pytest.raises(ConfigError):
        check_split_hygiene(ood_from_trained)


def test_prompt_config_dict_restores_prompt():
    config = PromptConfig.from_dict({'config_id': 'geom-up-000', 'family': 'geom', 'params': {'p': 0.125},
                                     'split': UNSEEN})
    assert config.prompt == render_prompt(config.spec)
    assert config.family == 'geom'
