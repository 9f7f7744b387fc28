import numpy as np
import pytest

from mocapkit.skeleton import Skeleton, default_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def chain5():
    """Five-joint chain with assorted offsets, every joint rotational."""
    offsets = [[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [0.0, 0.4, 0.2], [0.25, -0.1, 0.1], [0.0, 0.0, 0.35]]
    return Skeleton(
        joint_names=[f"j{k}" for k in range(5)],
        parents=[-1, 0, 1, 2, 3],
        rest_offsets=offsets,
        rotation_joint_count=5,
    )
