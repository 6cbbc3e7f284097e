import numpy as np
import pytest

from fedlora._jit import HAVE_NUMBA

KERNEL_PATHS = [
    pytest.param(True, id="numba", marks=pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")),
    pytest.param(False, id="numpy"),
]


@pytest.fixture(params=KERNEL_PATHS)
def use_jit(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20241016)
