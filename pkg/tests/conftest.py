import numpy as np
import pytest

from core.datagen import TaskBatch, ToySpec, generate_toy
from core.models import Architecture, init_network
from core.objectives import LossSpec
from core.settings import make_config
from core.tensor import make_rng


@pytest.fixture
def small_arch():
    return Architecture(
        input_dim=4,
        shared=[6, 5],
        heads=[[4], [3]],
        output_dims=[1, 2],
        head_activation="tanh",
    )


@pytest.fixture
def small_net(small_arch):
    return init_network(small_arch, make_rng(7))


@pytest.fixture
def regression_batch():
    rng = make_rng(11)
    n = 6
    return TaskBatch(
        X=rng.standard_normal((n, 4)),
        targets=(rng.standard_normal((n, 1)), rng.standard_normal((n, 2))),
        corrupted=np.zeros((2, n), dtype=bool),
        indices=np.arange(n),
    )


@pytest.fixture
def mse_specs():
    return (LossSpec("mse"), LossSpec("mse"))


@pytest.fixture
def toy_dataset():
    return generate_toy(ToySpec(n_train=80, n_val=40, n_test=40, noise_fraction=0.4, seed=3))


@pytest.fixture
def tiny_config():
    """A run small enough for unit tests."""
    return make_config(
        algorithm="slgrad",
        dataset="toy",
        noise=0.4,
        n_train=80,
        n_val=40,
        n_test=40,
        shared_layers=1,
        shared_width=8,
        task_layers=2,
        task_width=4,
        batch_size=8,
        steps=20,
        eval_every=5,
        lr=0.05,
        seed=1,
    )
