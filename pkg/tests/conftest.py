from pathlib import Path

import numpy as np
import pytest

from percolation import Configuration, SpaceTimeBox
from serialization import read_table

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def two_spin_closed_form() -> dict[str, list[float]]:
    """
    The closed-form energies and one-spin marginal of the two-spin chain at lambda=2, delta=1.
    """
    _, rows = read_table(FIXTURES / "two_spin_closed_form.csv")
    values: dict[str, list[float]] = {}

    for row in rows:
        values.setdefault(row["quantity"], []).append(float(row["value"]))

    return values


@pytest.fixture
def unit_box() -> SpaceTimeBox:
    """Two lines over [-1, 1] with free ends and no slit."""
    return SpaceTimeBox(x_min=0, x_max=1, t_min=-1.0, t_max=1.0)


@pytest.fixture
def small_slit_box() -> SpaceTimeBox:
    return SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)


def make_configuration(deaths, bridges) -> Configuration:
    return Configuration(
        deaths=tuple(np.asarray(times, dtype=np.float64) for times in deaths),
        bridges=tuple(np.asarray(times, dtype=np.float64) for times in bridges),
    )
