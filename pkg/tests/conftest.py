import numpy as np
import pytest

from cbamdet.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def _float64_default():
    # tests that switch dtype must not leak it into their neighbours
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)
