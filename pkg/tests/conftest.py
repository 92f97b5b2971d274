import sys

import numpy as np
import pytest
from hypothesis import settings

from scatterfield.phase import PhaseModel
from scatterfield.scene import DistantLight, Medium
from scatterfield.volume_grid import DensityGrid, MaterialClass, MediumProperties

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def homogeneous_medium(n=8, sigma=4.0, albedo=0.9, phase=None, density=1.0, material=MaterialClass.SOLID_LIQUID):
    """Unit cube of constant density centered at the origin."""
    grid = DensityGrid(np.full((n, n, n), density, np.float32), 1.0 / n, np.full(3, -0.5))
    props = MediumProperties((sigma,) * 3, (albedo,) * 3, material)
    return Medium(grid, props, phase or PhaseModel.hg(0.857))


@pytest.fixture
def cube8():
    return homogeneous_medium()


@pytest.fixture
def down_light():
    return DistantLight([0.0, -1.0, 0.0])


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-300)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
