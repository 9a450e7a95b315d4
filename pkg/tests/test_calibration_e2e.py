"""Scaled-down calibration runs on a three-family micro-grid (minutes each)."""

import numpy as np
import pytest

import evaluator
from benchmark import TRAIN, UNSEEN, BenchmarkGrid, generate_benchmark, split_configs
from evaluator import EvalSettings
from token_trie import Vocabulary, build_trie
from discretizer import build_output_space
from toy_model import ModelConfig, ToyTransformer
from trainers import HARD, SOFT, TrainingConfig, train_hard, train_soft

pytestmark = pytest.mark.slow

MICRO_GRID = BenchmarkGrid(
    families=['uniform', 'bernoulli', 'binom'],
    table_train=[],
    custom_train=[
        {'family': 'uniform', 'grid': {'a': [0, 1, 2], 'w': [1, 2]}},
        {'family': 'bernoulli', 'grid': {'p': [0.2, 0.3, 0.5, 0.7, 0.8]}},
        {'family': 'binom', 'grid': {'n': [5, 10], 'p': [0.3, 0.5, 0.7]}},
    ],
    custom_test=[{'family': 'binom', 'params': {'n': 10, 'p': 0.4}}],
    include_table_tests=False,
)
MODEL = ModelConfig(context_length=48, width=48, layers=2, heads=4, mlp_ratio=4, seed=0)
EVAL = EvalSettings(samples_per_prompt=1000, n_paths=4, seed=0, decimals=5, max_bins=16384)


@pytest.fixture(scope='module')
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope='module')
def micro_configs():
    configs = generate_benchmark(MICRO_GRID)
    assert len(split_configs(configs, TRAIN)) == 17
    return configs


@pytest.fixture(scope='module')
def eval_tries(micro_configs, vocab):
    return {c.config_id: build_trie(build_output_space(c.spec, EVAL.decimals, EVAL.max_bins), vocab)
            for c in micro_configs}


@pytest.fixture(scope='module')
def soft_model(micro_configs, vocab):
    tconfig = TrainingConfig.defaults(SOFT, epochs=150, batch_size=2, learning_rate=3e-3, seed=0)
    model, trace = train_soft(split_configs(micro_configs, TRAIN), ToyTransformer(MODEL, vocab), None, tconfig)
    assert len(trace) <= 2000
    return model


@pytest.fixture(scope='module')
def hard_model(micro_configs, vocab):
    tconfig = TrainingConfig.defaults(HARD, epochs=2, samples_per_prompt=16, batch_size=1,
                                      learning_rate=5e-3, seed=0)
    model, trace = train_hard(split_configs(micro_configs, TRAIN), ToyTransformer(MODEL, vocab), None, tconfig)
    assert len(trace) == 17 * 16 * 2
    return model


def test_soft_training_cuts_logit_kl(soft_model, micro_configs, vocab, eval_tries):
    train = split_configs(micro_configs, TRAIN)
    settings = EvalSettings(samples_per_prompt=50, n_paths=4, seed=0)
    before = evaluator.evaluate_condition(ToyTransformer(MODEL, vocab), train, settings, 'base', TRAIN, eval_tries)
    after = evaluator.evaluate_condition(soft_model, train, settings, SOFT, TRAIN, eval_tries)
    assert after.mean_kl <= 0.2 * before.mean_kl


def test_soft_training_matches_targets(soft_model, micro_configs, eval_tries):
    report = evaluator.evaluate_condition(soft_model, split_configs(micro_configs, TRAIN), EVAL, SOFT, TRAIN,
                                          eval_tries)
    for fam, w in report.family_w1.items():
        assert w is not None and w <= 0.10, fam


def test_hard_training_recovers_bernoulli(hard_model, micro_configs):
    config = next(c for c in micro_configs if c.family == 'bernoulli' and c.params['p'] == 0.3)
    draws = evaluator.sample_from_model(hard_model, config, 10_000, np.random.default_rng(0))
    assert abs(draws.count('1') / len(draws) - 0.3) <= 0.03


def test_hard_training_single_bernoulli(micro_configs, vocab):
    config = next(c for c in micro_configs if c.family == 'bernoulli' and c.params['p'] == 0.3)
    model = ToyTransformer(ModelConfig(context_length=32, width=16, layers=2, heads=2, mlp_ratio=2, seed=7), vocab)
    tconfig = TrainingConfig.defaults(HARD, epochs=25, samples_per_prompt=16, batch_size=1,
                                      learning_rate=5e-3, seed=0)
    model, trace = train_hard([config], model, None, tconfig)
    assert len(trace) == 400
    draws = evaluator.sample_from_model(model, config, 10_000, np.random.default_rng(1))
    assert abs(draws.count('1') / len(draws) - 0.3) <= 0.03


def test_hard_training_matches_targets(hard_model, micro_configs, eval_tries):
    report = evaluator.evaluate_condition(hard_model, split_configs(micro_configs, TRAIN), EVAL, HARD, TRAIN,
                                          eval_tries)
    for fam, w in report.family_w1.items():
        assert w is not None and w <= 0.10, fam


def test_soft_model_generalizes_to_unseen_binomial(soft_model, micro_configs, eval_tries):
    unseen = split_configs(micro_configs, UNSEEN)
    assert [(c.family, c.params) for c in unseen] == [('binom', {'n': 10.0, 'p': 0.4})]
    report = evaluator.evaluate_condition(soft_model, unseen, EVAL, SOFT, UNSEEN, eval_tries)
    assert report.records[0].normalized_w1 is not None
    assert report.records[0].normalized_w1 <= 0.2
