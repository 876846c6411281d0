"""Shared fixtures: small oracle models with known answers, exact-moment configs,
and logger isolation.

Models are drawn with fixed seeds so every test sees the same parameters.
"""

import pytest

from latree import logging_setup
from latree.config import RunConfig
from latree.oracle import ModelMoments, exact_distances, random_latent_tree


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop handlers attached by configure_logging and restore the default run id."""
    token = logging_setup.run_id_var.set("-")
    yield
    logging_setup.run_id_var.reset(token)
    for handler in list(logging_setup._configured_handlers):
        logging_setup.logger.removeHandler(handler)
        handler.close()
    logging_setup._configured_handlers.clear()


@pytest.fixture
def star_model():
    """One hidden node (id 3) joining observed 0, 1, 2."""
    return random_latent_tree(3, 2, dims=4, seed=11)


@pytest.fixture
def cherries_model():
    """Hidden 4 over {0, 1}, hidden 5 over {2, 3}, edge 4-5."""
    return random_latent_tree(4, 2, dims=3, seed=5)


@pytest.fixture
def balanced_model():
    return random_latent_tree(8, 2, dims=3, topology="balanced", seed=3)


@pytest.fixture
def caterpillar_model():
    return random_latent_tree(8, 2, dims=3, topology="caterpillar", seed=7)


@pytest.fixture
def exact_config():
    return RunConfig(k=2, epsilon=1e-7, threads=1, seed=0)


@pytest.fixture
def exact_source(balanced_model):
    return ModelMoments(balanced_model)


@pytest.fixture
def balanced_distances(balanced_model):
    return exact_distances(balanced_model)
