import numpy as np
import pytest

from kdepth.core import Ensemble, unit_grid
from kdepth.fieldsim import matern_spec, sample_fields


@pytest.fixture
def grid8():
    return unit_grid(8, 8)


@pytest.fixture
def pair(grid8):
    """Two independent same-law Matérn ensembles on an 8x8 grid."""
    spec = matern_spec(grid8, 0.4, 1.0)
    rng = np.random.default_rng(11)
    return sample_fields(spec, 40, rng, "X"), sample_fields(spec, 30, rng, "Y")


def constant_ensemble(values, grid):
    """Members that are constant fields, one per value."""
    v = np.asarray(values, dtype=float)
    return Ensemble(grid, np.repeat(v[:, None], grid.size, axis=1))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
