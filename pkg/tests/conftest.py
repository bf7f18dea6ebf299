import numpy as np
import pytest

from src.models.schemas import LecomhConfig, OptConfig, PretrainConfig
from src.services.data import annotate, annotators_from_config, gen_blobs
from src.services.pretrain import pretrain_classifier


def small_lecomh_config(**overrides) -> LecomhConfig:
    values = dict(
        opt=OptConfig(epochs=6, batch_size=64, learning_rate=0.05),
        selection_hidden=[16],
        collab_hidden=[32],
    )
    values.update(overrides)
    return LecomhConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def blobs():
    """4-class blobs with three confusion annotators at 80/90/70% accuracy."""
    train, test = gen_blobs(4, 8, 400, 200, 4.0, seed=3)
    specs = annotators_from_config(4, [0.8, 0.9, 0.7], [], seed=3)
    return annotate(train, specs, 3), annotate(test, specs, 4)


@pytest.fixture(scope="session")
def classifier(blobs):
    config = PretrainConfig(opt=OptConfig(epochs=8, batch_size=64), warmup_epochs=2, hidden=[16])
    return pretrain_classifier(blobs[0], config, seed=3)


@pytest.fixture
def make_lecomh_config():
    return small_lecomh_config
