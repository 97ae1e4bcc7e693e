import numpy as np
import pytest
from hypothesis import settings

from webvse.synthetic import SyntheticConfig, make_world, write_world

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# a world small enough for a few seconds of CLI training
MICRO = SyntheticConfig(
    n_train=40, n_heldout_clean=8, n_heldout_web=2, n_val=10, n_web=60, owners=40, seed=5
)


@pytest.fixture
def rng():
    return np.random.default_rng(2023)


@pytest.fixture(scope="session")
def micro_world():
    return make_world(MICRO)


@pytest.fixture
def raw_inputs(micro_world, tmp_path):
    return write_world(micro_world, tmp_path / "raw", n_val=10, n_folds=5)
