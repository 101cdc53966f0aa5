import math

import numpy as np
import pytest

from averaging import average_reduced
from ode_core import IntegratorConfig
from slowfast import example1, reduce_to_fast_axis
from stability_lab import NominalSystem


def _no_slow_block(w, v, z):
    return np.zeros((0,) + np.shape(w)[1:])


@pytest.fixture
def precise():
    return IntegratorConfig(rtol=1e-10, atol=1e-12)


@pytest.fixture
def rk4_fine():
    return IntegratorConfig(scheme="rk4_fixed", step=1e-3)


@pytest.fixture
def example1_reduced():
    return reduce_to_fast_axis(example1(0.05))


@pytest.fixture
def example1_averaged_unit_eps():
    return average_reduced(reduce_to_fast_axis(example1(1.0)), 16)


@pytest.fixture
def scalar_decay():
    """dw/dz = -w, the oracle with V = w^2 (1 - exp(-2 delta)) / 2."""
    return NominalSystem(lambda w, v, z: -w, _no_slow_block, 1, 0, name="scalar_decay")


@pytest.fixture
def scalar_oracle_c():
    return lambda delta: (1.0 - math.exp(-2.0 * delta)) / 2.0
