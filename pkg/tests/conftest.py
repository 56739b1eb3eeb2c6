import numpy as np
import pytest

from needleplan import generate_level
from needleplan.gmm import FitConfig
from needleplan.scripted import scripted_demos
from needleplan.skills import train_bundle


@pytest.fixture(scope="session")
def train_levels():
    return [generate_level(2, 2, seed=100 + i, level_id=f"train_{i:03d}")
            for i in range(6)]


@pytest.fixture(scope="session")
def demo_pairs(train_levels):
    pairs = []
    for i, lvl in enumerate(train_levels):
        for demo in scripted_demos(lvl, n=3, seed=i):
            pairs.append((demo, lvl))
    return pairs


@pytest.fixture(scope="session")
def bundle(demo_pairs):
    return train_bundle(demo_pairs, FitConfig(k=3, seed=0))


@pytest.fixture(scope="session")
def eval_level():
    return generate_level(2, 2, seed=7, level_id="level_000")


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
