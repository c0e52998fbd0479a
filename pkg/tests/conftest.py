import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_affine(rng, shape="triangle", scale=(0.2, 2.0)):
    """Random orientation-preserving, reasonably shaped affine map (J, b)."""
    while True:
        J = rng.uniform(-1, 1, (2, 2)) + np.eye(2) * 1.5
        J *= rng.uniform(*scale)
        if np.linalg.det(J) > 0 and np.linalg.cond(J) < 6:
            return J, rng.uniform(-1, 1, 2)
