"""Shared fixtures: the desk-scale two-qubit phonon runs reused across modules."""

import numpy as np
import pytest

from mqns.bath import DephasingModel, OhmicDensity, inverse_temperature_ps
from mqns.reconstruction import HarmonicGrid, run_reconstruction

TRANSIT_PS = 10.0 / 7.0  # 10 nm separation / 7 km/s sound speed


def exciton_model(collective=True, **kwargs):
    """Two-qubit Ohmic phonon model at 5 K used throughout the suite."""
    transit = np.array([[0.0, TRANSIT_PS], [-TRANSIT_PS, 0.0]])
    return DephasingModel(
        2,
        OhmicDensity(0.001, 1.5),
        inverse_temperature_ps(5.0),
        transit,
        collective=collective,
        **kwargs,
    )


@pytest.fixture(scope="session")
def exciton_run():
    """33-harmonic reconstruction with exact expectations (slow, shared)."""
    model = exciton_model()
    grid = HarmonicGrid(60.0, 32)
    return model, grid, run_reconstruction(model, grid, omega_max=9.0)


@pytest.fixture(scope="session")
def exciton_run_m1():
    """Same bath without the collective label: the swap route is primary."""
    model = exciton_model(collective=False)
    grid = HarmonicGrid(60.0, 32)
    return model, grid, run_reconstruction(model, grid, omega_max=9.0)
