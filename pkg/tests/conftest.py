import warnings

import numpy as np
import pytest

from rirkit.geometry import shoebox_room


@pytest.fixture(autouse=True)
def _quiet_expected_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="delay of .* samples exceeds")
        yield


@pytest.fixture
def box_room():
    return shoebox_room(4.0, 5.0, 3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_interior_points(rng, lx, ly, lz, n, margin=0.3):
    return rng.uniform([margin] * 3, [lx - margin, ly - margin, lz - margin], size=(n, 3))
