from collections import Counter

import numpy as np
import pandas as pd
import pytest

import trainers
from benchmark import TRAIN, BenchmarkGrid, ConfigError, PromptConfig, generate_benchmark, render_prompt, split_configs
from dist_engine import DistributionSpec
from token_trie import encode_prompt, tokenize_output
from toy_model import ModelConfig, ToyTransformer, TrainingDivergedError, softmax
from trainers import HARD, SOFT, TRACE_COLUMNS, TrainingConfig, family_balanced_order, planned_steps


def make_config(family, params, k=0):
    spec = DistributionSpec(family, params)
    return PromptConfig(f'{family}-tr-{k:03d}', spec, TRAIN, render_prompt(spec))


@pytest.fixture
def bernoulli_configs():
    return [make_config('bernoulli', {'p': p}, k) for k, p in enumerate((0.2, 0.5, 0.8))]


@pytest.fixture
def mixed_configs():
    return [
        make_config('bernoulli', {'p': 0.3}, 0),
        make_config('bernoulli', {'p': 0.6}, 1),
        make_config('binom', {'n': 3, 'p': 0.5}, 0),
        make_config('poisson', {'lambda': 1.5}, 0),
    ]


def test_planned_steps():
    tconfig = TrainingConfig.defaults(HARD, samples_per_prompt=16, batch_size=8, epochs=2)
    assert planned_steps(4, tconfig) == 16
    soft = TrainingConfig.defaults(SOFT, batch_size=8, epochs=3)
    assert planned_steps(20, soft) == 9


def test_method_defaults():
    soft = TrainingConfig.defaults(SOFT)
    hard = TrainingConfig.defaults(HARD)
    assert (soft.max_bins, soft.epochs) == (1001, 3)
    assert (hard.max_bins, hard.epochs, hard.samples_per_prompt) == (16384, 2, 16)
    assert TrainingConfig.from_dict(SOFT, {'epochs': 5, 'bogus': 1}).epochs == 5


@pytest.mark.parametrize('overrides', [
    {'samples_per_prompt': 0}, {'epochs': -1}, {'batch_size': 0}, {'warmup_fraction': 1.5},
])
def test_invalid_training_config(overrides):
    with pytest.raises(ConfigError):
        TrainingConfig.defaults(HARD, **overrides)


def test_unknown_method():
    with pytest.raises(ConfigError):
        TrainingConfig.defaults('rl')


def test_two_families_alternate():
    items = [('a', 1), ('a', 2), ('b', 1), ('b', 2)]
    order = family_balanced_order(items, np.random.default_rng(0), key=lambda item: item[0])
    families = [fam for fam, _ in order]
    assert families[0] == families[2]
    assert families[1] == families[3]
    assert families[0] != families[1]
    assert sorted(order) == sorted(items)


def test_single_family_is_a_shuffle():
    items = [('a', i) for i in range(10)]
    order = family_balanced_order(items, np.random.default_rng(3), key=lambda item: item[0])
    assert sorted(order) == items


def test_every_window_covers_all_families():
    families = [f'f{i:02d}' for i in range(24)]
    items = [(fam, k) for fam in families for k in range(3)]
    order = family_balanced_order(items, np.random.default_rng(11), key=lambda item: item[0])
    for start in range(len(order) - 23):
        assert len({fam for fam, _ in order[start:start + 24]}) == 24


def test_uneven_families_keep_every_item():
    items = [('a', k) for k in range(3)] + [('b', k) for k in range(9)]
    order = family_balanced_order(items, np.random.default_rng(2), key=lambda item: item[0])
    assert Counter(order) == Counter(items)
    families = [fam for fam, _ in order]
    assert 'a' in families[:4]
    assert 'a' in families[-4:]
    positions = [i for i, fam in enumerate(families) if fam == 'a']
    for left, right in zip(positions, positions[1:]):
        assert 2 <= right - left - 1 <= 4


@pytest.fixture(scope='module')
def default_train_configs():
    return split_configs(generate_benchmark(BenchmarkGrid()), TRAIN)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_default_grid_windows_stay_mixed(default_train_configs, seed):
    order = family_balanced_order(default_train_configs, np.random.default_rng(seed))
    assert len(order) == len(default_train_configs) == 1906
    families = [c.family for c in order]
    worst = min(len(set(families[start:start + 24])) for start in range(len(families) - 23))
    assert worst >= 15
    assert len(set(families[-200:])) >= 20
    assert len(set(families[:200])) >= 20


def test_zero_epochs_leave_model_untouched(tiny_model, bernoulli_configs):
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    tconfig = TrainingConfig.defaults(SOFT, epochs=0)
    model, trace = trainers.train_soft(bernoulli_configs, tiny_model, None, tconfig)
    assert trace == []
    for k, v in before.items():
        assert np.array_equal(model.params[k], v)


def test_soft_training_is_deterministic(tiny_config, vocab, mixed_configs):
    tconfig = TrainingConfig.defaults(SOFT, epochs=2, batch_size=2, learning_rate=1e-3, seed=5)
    runs = []
    for _ in range(2):
        model = ToyTransformer(tiny_config, vocab)
        model, trace = trainers.train_soft(mixed_configs, model, None, tconfig)
        runs.append((model, trace))
    assert [r['loss'] for r in runs[0][1]] == [r['loss'] for r in runs[1][1]]
    for k in runs[0][0].params:
        assert np.array_equal(runs[0][0].params[k], runs[1][0].params[k])


def test_hard_trace_and_checkpoints(tmp_path, tiny_model, mixed_configs):
    tconfig = TrainingConfig.defaults(HARD, epochs=2, samples_per_prompt=4, batch_size=8,
                                      learning_rate=1e-3, seed=1)
    trace_path = tmp_path / 'traces' / 'hard.csv'
    _, trace = trainers.train_hard(mixed_configs, tiny_model, None, tconfig, trace_path=trace_path,
                                   checkpoint_dir=tmp_path / 'checkpoints', config_hash='abc123')
    assert len(trace) == planned_steps(len(mixed_configs), tconfig) == 4
    assert sum(r['sequences'] for r in trace) == len(mixed_configs) * 4 * 2
    assert [r['step'] for r in trace] == [1, 2, 3, 4]

    frame = pd.read_csv(trace_path)
    assert list(frame.columns) == TRACE_COLUMNS
    assert len(frame) == 4
    assert set(frame['config_hash']) == {'abc123'}
    assert frame['loss'].tolist() == pytest.approx([r['loss'] for r in trace])
    assert sorted(p.name for p in (tmp_path / 'checkpoints').iterdir()) == ['epoch_01.npz', 'epoch_02.npz']


def test_first_logged_rate_is_zero(tiny_model, mixed_configs):
    tconfig = TrainingConfig.defaults(SOFT, epochs=3, batch_size=2)
    _, trace = trainers.train_soft(mixed_configs, tiny_model, None, tconfig)
    assert trace[0]['learning_rate'] == 0.0
    assert max(r['learning_rate'] for r in trace) == pytest.approx(tconfig.learning_rate)


def test_method_mismatch(tiny_model, mixed_configs):
    with pytest.raises(ConfigError):
        trainers.train_hard(mixed_configs, tiny_model, None, TrainingConfig.defaults(SOFT))


def test_prompt_longer_than_context(vocab, mixed_configs):
    model = ToyTransformer(ModelConfig(context_length=8, width=16, layers=1, heads=2), vocab)
    with pytest.raises(ConfigError):
        trainers.train_soft(mixed_configs, model, None, TrainingConfig.defaults(SOFT, epochs=1))


def test_non_finite_loss_aborts(tiny_model, mixed_configs):
    tiny_model.params['wte'][:] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        trainers.train_soft(mixed_configs, tiny_model, None, TrainingConfig.defaults(SOFT, epochs=1))
    assert info.value.trace == []


def test_soft_training_learns(tiny_model, mixed_configs):
    tconfig = TrainingConfig.defaults(SOFT, epochs=40, batch_size=1, learning_rate=1e-2, seed=2)
    _, trace = trainers.train_soft(mixed_configs, tiny_model, None, tconfig)
    assert np.mean([r['loss'] for r in trace[-20:]]) < 0.5 * np.mean([r['loss'] for r in trace[:20]])


def test_hard_training_learns(tiny_model, mixed_configs):
    tconfig = TrainingConfig.defaults(HARD, epochs=10, samples_per_prompt=8, batch_size=2,
                                      learning_rate=1e-2, seed=2)
    _, trace = trainers.train_hard(mixed_configs, tiny_model, None, tconfig)
    assert len(trace) == 160
    losses = [r['loss'] for r in trace]
    tenth = len(losses) // 10
    assert np.mean(losses[-tenth:]) < 0.5 * np.mean(losses[:tenth])


def test_stratified_completions_match_target_counts(vocab):
    targets = trainers.prepare_targets([make_config('bernoulli', {'p': 0.3})], vocab, 5, 16384, with_tries=False)
    one = tokenize_output(vocab, '1')
    for seed in range(4):
        completions = trainers.draw_completions(targets, vocab, 10, np.random.default_rng(seed))
        assert len(completions) == 10
        assert sum(c.tokens == one for c in completions) == 3
        assert all(c.family == 'bernoulli' for c in completions)


def test_independent_completions_cover_support(vocab):
    targets = trainers.prepare_targets([make_config('bernoulli', {'p': 0.3})], vocab, 5, 16384, with_tries=False)
    completions = trainers.draw_completions(targets, vocab, 400, np.random.default_rng(0), stratified=False)
    ones = sum(c.tokens == tokenize_output(vocab, '1') for c in completions)
    assert 80 <= ones <= 160


def test_soft_training_recovers_bernoulli_half(tiny_model, vocab):
    config = make_config('bernoulli', {'p': 0.5})
    tconfig = TrainingConfig.defaults(SOFT, epochs=200, batch_size=1, learning_rate=1e-2, seed=0)
    model, trace = trainers.train_soft([config], tiny_model, None, tconfig)
    assert len(trace) == 200
    probs = softmax(model.next_logits(encode_prompt(vocab, config))[0])
    assert abs(probs[vocab.id('0')] - 0.5) <= 0.02
    assert abs(probs[vocab.id('1')] - 0.5) <= 0.02


def test_train_dispatch(tiny_model, mixed_configs):
    tconfig = TrainingConfig.defaults(HARD, epochs=1, samples_per_prompt=2, batch_size=4)
    _, trace = trainers.train(HARD, mixed_configs, tiny_model, None, tconfig)
    assert {r['method'] for r in trace} == {HARD}
    assert len(trace) == 2
