import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.data_service import generate_blink_dataset, partition_unbalanced, train_test_split
from src.models import FederationConfig, LayerSpec, NetworkSpec, PartitionSpec, SyntheticBlinkSpec
from src.tensor_nn import RngStream, build_blink_net, init_params


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def micro_net(dropout: float = 0.0) -> NetworkSpec:
    """6x6 input, one conv block, three classes"""
    layers = [
        LayerSpec(kind="conv2d", kernel=(3, 3), channels=2),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2d", pool=2),
    ]
    if dropout:
        layers.append(LayerSpec(kind="dropout", rate=dropout))
    layers += [
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=3),
        LayerSpec(kind="softmax"),
    ]
    return NetworkSpec(name="micro", layers=tuple(layers), input_shape=(6, 6, 1), num_classes=3)


@pytest.fixture
def micro_spec():
    return micro_net()


@pytest.fixture
def blink_spec_16():
    return build_blink_net((16, 16, 1))


@pytest.fixture
def blink_params_16(blink_spec_16):
    return init_params(blink_spec_16, RngStream(0, 1))


@pytest.fixture
def tiny_dataset():
    return generate_blink_dataset(SyntheticBlinkSpec(image_size=(16, 16), num_samples=100, seed=3))


@pytest.fixture
def tiny_split(tiny_dataset):
    return train_test_split(tiny_dataset, 0.2, seed=0)


@pytest.fixture
def tiny_partition(tiny_split):
    train, _ = tiny_split
    return partition_unbalanced(train, PartitionSpec(num_parts=4, mu=18, sigma=2, seed=0))


@pytest.fixture
def tiny_config():
    return FederationConfig(
        K=2, N=4, C=1.0, E=1, M=2, T=2, epsilon=0.0, eta=0.05, batch_size=16,
    )


@pytest.fixture
def random_images():
    return np.random.default_rng(7).random((5, 16, 16, 1)).astype(np.float32)
