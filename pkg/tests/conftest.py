import functools

import pytest

from cusplab.model import ParabolicModel, default_model
from cusplab.oracle import generate_mu

CORPUS_V = ["0.1", "-0.1", "0.05*(1+h)", "0.05*(1+h+lambda^2)"]
CORPUS_G = ["1", "1+0.3*tanh(x+y)"]


@functools.lru_cache(maxsize=None)
def model_for(g="1"):
    return ParabolicModel.create(g=g)


@functools.lru_cache(maxsize=None)
def oracle_map(v, g="1"):
    return generate_mu(model_for(g), v)


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def mu01():
    return oracle_map("0.1")
