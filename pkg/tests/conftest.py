import numpy as np
import pytest

from maxvit_unet import kernels

BACKENDS = ["numpy", "numba"] if kernels.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
