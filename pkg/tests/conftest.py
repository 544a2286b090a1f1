import numpy as np
import pytest

from litho_data import generate_synthetic, partition, split_public_private
from nn_engine import INPUT_SHAPE, ModelSpec, dense, flatten


@pytest.fixture(scope="session")
def small_data():
    """(public, private, test) small enough for multi-round runs"""
    train = generate_synthetic(120, 0.25, seed=3, name="train")
    public, private = split_public_private(train, 0.5, seed=4)
    test = generate_synthetic(60, 0.2, seed=5, name="test")
    return public, private, test


@pytest.fixture(scope="session")
def shards_of(small_data):
    def make(n_clients, mode="iid", alpha=None, seed=0):
        _, private, _ = small_data
        return partition(private, n_clients, mode, alpha, seed).shards(private)
    return make


@pytest.fixture
def linear_spec():
    """Flatten -> FC1 (3 units, private) -> FC2 (2 units, shared); no activations"""
    def make(shared=("FC2",), hidden=3):
        layers = (flatten("Flatten"), dense("FC1", hidden), dense("FC2", 2))
        return ModelSpec(INPUT_SHAPE, layers, frozenset(shared))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
