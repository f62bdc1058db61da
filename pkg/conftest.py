"""
Shared fixtures for the test suite
"""

import numpy as np
import pytest

from analytic_oracle import GaussianMixtureSpec
from datasets import DatasetSpec, make_dataset
from flow_train import TrainBatch
from velocity_model import ModelArch, VelocityModel, init_params


@pytest.fixture
def ring4():
    return GaussianMixtureSpec.ring(4, dim=2, radius=4.0, variance=0.09)


@pytest.fixture
def tiny_arch():
    return ModelArch(data_dim=2, num_classes=4, hidden=8, depth=2, time_dim=4, class_dim=3)


@pytest.fixture
def infill_arch():
    return ModelArch(data_dim=2, num_classes=4, hidden=6, depth=1, prompt_dim=4, time_dim=4, class_dim=3)


@pytest.fixture
def random_model():
    """Factory: a model with every parameter (output layer included) drawn from N(0, scale^2)"""
    def make(arch: ModelArch, seed: int = 0, scale: float = 0.5) -> VelocityModel:
        rng = np.random.default_rng(seed)
        base = init_params(seed, arch)
        return VelocityModel(arch, {k: scale * rng.standard_normal(v.shape) for k, v in base.params.items()})
    return make


@pytest.fixture
def mixture_spec(ring4):
    return DatasetSpec("mixture", ring4, n_items=64, seed=0)


@pytest.fixture
def tiny_dataset(mixture_spec):
    return make_dataset(mixture_spec)


@pytest.fixture
def infill_dataset(ring4):
    return make_dataset(DatasetSpec("infill", ring4, n_items=32, seed=1))


@pytest.fixture
def tiny_batch(tiny_dataset):
    index = np.arange(6)
    return TrainBatch(tiny_dataset.x[index], tiny_dataset.condition_batch(index))
