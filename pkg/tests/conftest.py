import numpy as np
import pytest

from rampkit.calibrate import collect_act_scales
from rampkit.seeding import substream
from rampkit.tinylm import TinyModelSpec, generate_model, make_corpus


@pytest.fixture(scope="session")
def small_spec():
    return TinyModelSpec(vocab_size=64, d_model=32, n_heads=4, n_blocks=2, d_ff=64, max_seq_len=32, seed=3)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return generate_model(small_spec)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return make_corpus(small_spec.vocab_size, 4, 4, 16, substream(3, "corpus"))


@pytest.fixture(scope="session")
def small_stats(small_model, small_corpus):
    return collect_act_scales(small_model, small_corpus.calibration)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
