import numpy as np
import pytest

from fetalfit.volume_io import AcquisitionProtocol


@pytest.fixture(scope="session")
def protocol():
    return AcquisitionProtocol.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
