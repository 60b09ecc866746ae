import numpy as np
import pytest

from nanoglm import TOY_LIBRARY, TOY_QA_CORPUS, data_path
from nanoglm.corpus import load_qa_corpus
from nanoglm.model import ModelConfig, init_model
from nanoglm.prompt import load_library

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_bundle(tiny_config):
    return init_model(tiny_config, seed=11)


@pytest.fixture(scope="session")
def toy_library():
    return load_library(data_path(TOY_LIBRARY))


@pytest.fixture(scope="session")
def toy_corpus():
    return load_qa_corpus(data_path(TOY_QA_CORPUS)).records


@pytest.fixture()
def np_rng():
    return np.random.default_rng(1234)
