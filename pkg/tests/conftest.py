import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from cs3d import kernels

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("cs3d", max_examples=40, deadline=None)
settings.load_profile("cs3d")

BACKENDS = ["numba", "numpy"] if kernels.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend."""
    old = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
