import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dgflow.mesh import build_structured_mesh

SAMPLES = Path(__file__).parent.parent / "samples"


@pytest.fixture(scope="session")
def mesh11():
    return build_structured_mesh(1, 1)


@pytest.fixture(scope="session")
def mesh22():
    return build_structured_mesh(2, 2)


@pytest.fixture(scope="session")
def mesh44():
    return build_structured_mesh(4, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
