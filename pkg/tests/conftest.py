import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

os.environ.setdefault('ONO_PROGRESS', '0')

from src.data.generators import generate_poisson1d  # noqa: E402
from src.model.ono import ModelConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: долгие приёмочные прогоны (pytest -m slow)')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=1, d=8, d_prime=8, k=4, coord_dim=1, in_channels=1, out_channels=1, seed=0)


@pytest.fixture
def poisson_small():
    return generate_poisson1d(10, 16, seed=3)
