import numpy as np
import pytest
from hypothesis import settings

from actnet import tensor as T

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def f64():
    """Run the test body with 64-bit default precision."""
    with T.precision(np.float64):
        yield


@pytest.fixture(autouse=True)
def fresh_tape():
    T.new_tape()
    yield
    T.new_tape()
