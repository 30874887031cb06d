import os

os.environ.setdefault("FITKIT_PROGRESS", "0")
os.environ.setdefault("FITKIT_LOG_LEVEL", "WARNING")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from fitkit.data import Dataset, make_synthetic_digits  # noqa: E402
from fitkit.models import LayerSpec, build_model, desk_cnn_specs, mlp_specs  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    """16 examples, 4 features, 3 classes."""
    gen = np.random.default_rng(7)
    inputs = gen.standard_normal((16, 4))
    labels = np.arange(16) % 3
    return Dataset(inputs, labels, 3)


@pytest.fixture
def tiny_mlp():
    """4 -> 5 -> 3 MLP (35 weights)."""
    return build_model(mlp_specs([5], 3), 3, (4,), seed=3)


@pytest.fixture
def softmax_regression():
    return build_model(mlp_specs([], 3), 3, (4,), seed=5)


@pytest.fixture
def digits():
    train = make_synthetic_digits(120, 4, 8, seed=0, split="train")
    test = make_synthetic_digits(60, 4, 8, seed=0, split="test")
    return train, test


@pytest.fixture
def tiny_cnn():
    return build_model(desk_cnn_specs(4, filters=(2, 3, 4)), 4, (1, 8, 8), seed=0)


@pytest.fixture
def tiny_bn_cnn():
    specs = [
        LayerSpec("conv", "conv1", channels=2),
        LayerSpec("batchnorm", "bn1"),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc", channels=4),
    ]
    return build_model(specs, 4, (1, 8, 8), seed=0)
