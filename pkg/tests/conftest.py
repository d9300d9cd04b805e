import numpy as np
import pytest

from platoon_mpc.platoon import PlatoonState
from platoon_mpc.presets import platoon_preset


def cruise_state(config, speed=25.0, u0=0.0):
    """All vehicles at the desired spacing and a common speed."""
    n = config.n
    x = -config.gap * np.arange(n + 1, dtype=float)
    v = np.full(n + 1, float(speed))
    return PlatoonState(x, v, u0)


@pytest.fixture
def small():
    return platoon_preset("small")


@pytest.fixture
def medium():
    return platoon_preset("medium")


@pytest.fixture
def large():
    return platoon_preset("large")


@pytest.fixture
def rng():
    return np.random.default_rng(42)
