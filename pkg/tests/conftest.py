import numpy as np
import pytest

from dist_engine import DistributionSpec
from discretizer import OutputSpace
from token_trie import Vocabulary, build_trie, encode_prompt
from toy_model import ModelConfig, ToyTransformer


@pytest.fixture(scope='session')
def vocab():
    return Vocabulary.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(context_length=32, width=16, layers=2, heads=2, mlp_ratio=2, seed=7)


@pytest.fixture
def tiny_model(tiny_config, vocab):
    return ToyTransformer(tiny_config, vocab)


@pytest.fixture
def randomized_model(tiny_model):
    """Tiny model with a non-zero output projection so every gradient path is live."""
    r = np.random.default_rng(99)
    tiny_model.params['lm_head'] = r.normal(0.0, 0.5, tiny_model.params['lm_head'].shape)
    return tiny_model


@pytest.fixture
def bernoulli_half():
    return DistributionSpec('bernoulli', {'p': 0.5})


@pytest.fixture
def bernoulli_half_trie(vocab):
    return build_trie(OutputSpace.from_masses({'0': 0.5, '1': 0.5}), vocab)


@pytest.fixture
def bernoulli_prompt(vocab, bernoulli_half):
    return encode_prompt(vocab, bernoulli_half)
