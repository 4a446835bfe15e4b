import os
import sys

import numpy as np
import pytest

# Tests import the library the same way the CLI does: from the project root
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from Heightfusion_lib.model_zoo import ArchScale  # noqa: E402
from Heightfusion_lib.synth_data import SceneSpec, generate_dataset  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return ArchScale.preset('tiny')


@pytest.fixture
def tiny_scenes():
    """Two 32x32 scenes with one building each."""
    return generate_dataset(SceneSpec(size=32, n_buildings=1), n_scenes=2, seed=5)
