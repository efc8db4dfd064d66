import numpy as np
import pytest

from menkf.model import ModelParams


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_state(rng, n, scale=1.0):
    """A generic (unbalanced) flat state for algebraic identities."""
    return scale * rng.standard_normal(3 * n)
