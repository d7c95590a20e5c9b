import numpy as np
import pytest

from d2prune.calibration import accumulate, gen_corpus
from d2prune.model import ModelConfig, generate_weights

TOY = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, vocab=64, max_seq=64)


def spd_matrix(rng, dim, scale=1.0):
    a = rng.normal(size=(dim, dim))
    return scale * (a.T @ a + np.eye(dim))


@pytest.fixture(scope="session")
def toy_config():
    return TOY


@pytest.fixture(scope="session")
def toy_model(toy_config):
    return generate_weights(toy_config, seed=7, structure="lowrank")


@pytest.fixture(scope="session")
def toy_corpus(toy_config):
    # 8 calibration samples of 32 tokens plus 4 held-out eval windows.
    return gen_corpus(toy_config.vocab, 8 * 32 + 4 * 32, seed=11, generator="markov2")


@pytest.fixture(scope="session")
def toy_stats(toy_model, toy_corpus):
    return accumulate(toy_model, toy_corpus, n_samples=8, seq_len=32)
