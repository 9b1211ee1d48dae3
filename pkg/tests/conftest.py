import numpy as np
import pytest

from cachecraft import ModelConfig, build_model


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig()  # L=4, H=4, d=64, vocab=256, seed=0


@pytest.fixture(scope="session")
def model(toy_config):
    return build_model(toy_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
