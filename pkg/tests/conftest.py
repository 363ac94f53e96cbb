import math

import pytest

from cavens.core import CavityParams, DecoherenceParams
from cavens.units import hz_to_angular


@pytest.fixture(scope="session")
def cavity():
    """Device-like cavity: kappa = 2pi 44 GHz, kappa_c/kappa = 0.2."""
    return CavityParams.from_hz(44e9, 8.8e9, 0.0, 304500e9)


@pytest.fixture(scope="session")
def decoherence():
    """Device-like rates: gamma_s = 2pi 600 Hz, gamma_d = 2pi 6 kHz."""
    return DecoherenceParams.from_hz(600, 6000)


@pytest.fixture(scope="session")
def g35():
    return hz_to_angular(35e6)


@pytest.fixture(scope="session")
def delta_inh():
    return hz_to_angular(150e6)


def coupling_for_cooperativity(c, cavity, delta_inh, n):
    """Uniform per-emitter g giving ensemble cooperativity c."""
    return math.sqrt(c * cavity.kappa * delta_inh / (4.0 * n))
