import numpy as np
import pytest

from m2sdf import noisegen


@pytest.fixture(scope="session")
def phantom_set():
    """Eight deterministic clean phantoms shared across statistical tests."""
    return [noisegen.make_phantom(noisegen.PhantomSpec(seed=s))[0] for s in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
