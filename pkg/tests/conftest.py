import numpy as np
import pytest
from hypothesis import settings

from densescan import netspec, nn, util
from densescan.tensor import Tensor, _wrap

# numba JIT makes first calls slow; never let hypothesis time them out.
settings.register_profile("densescan", deadline=None, max_examples=30)
settings.load_profile("densescan")


def rng_tensor(key: int, shape, low=-1.0, high=1.0) -> Tensor:
    count = int(np.prod(shape))
    return _wrap(util.uniform_floats(key, count, low, high).reshape(shape))


def make_weights(kernels, bias) -> nn.ConvWeights:
    return nn.ConvWeights(
        kernels=Tensor.from_array(kernels), bias=Tensor.from_array(bias)
    )


@pytest.fixture(scope="session")
def appendix_spec() -> netspec.NetworkSpec:
    """The reference descriptor network: patch 64, pool strides 2, 3, 4."""
    return netspec.NetworkSpec(
        patch=(64, 64),
        in_channels=3,
        layers=(
            netspec.Conv(32, (7, 7)),
            netspec.Pool("max", (2, 2), (2, 2)),
            netspec.Act("tanh"),
            netspec.Conv(64, (6, 6)),
            netspec.Pool("max", (3, 3), (3, 3)),
            netspec.Act("tanh"),
            netspec.Conv(128, (5, 5)),
            netspec.Pool("max", (4, 4), (4, 4)),
            netspec.Act("tanh"),
        ),
    )


@pytest.fixture(scope="session")
def small_spec() -> netspec.NetworkSpec:
    """A fast two-pool net used across integration tests (patch 10)."""
    return netspec.NetworkSpec(
        patch=(10, 10),
        in_channels=2,
        layers=(
            netspec.Conv(4, (3, 3)),
            netspec.Pool("max", (2, 2), (2, 2)),
            netspec.Act("tanh"),
            netspec.Conv(5, (2, 2)),
            netspec.Pool("mean", (3, 3), (3, 3)),
            netspec.Act("relu"),
        ),
    )
